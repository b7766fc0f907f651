"""Command-line entry points: train, generate, reconstruct, eval, probe."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, config_digest, config_from_entries, load_config, render_config, to_entries
from .metrics import sphere_concentration_check
from .model import UntrainedModelError, build_bundle, generate, reconstruct
from .training import Trainer, TrainingDiverged, run_experiment

log = logging.getLogger("latentmatch")

EXIT_USAGE = 2


class CliError(Exception):
    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# helpers


def out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get("LM_OUT_DIR") or "runs")


def run_dir_name(config) -> str:
    return f"run-{config_digest(config)}-s{config.seed}"


def write_text(path: Path | None, text: str):
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def points_csv(points: np.ndarray, extra: dict[str, np.ndarray] | None = None, d: int | None = None) -> str:
    d = points.shape[1] if d is None else d
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow([f"x{j}" for j in range(d)] + list(extra or {}))
    for i, row in enumerate(points):
        w.writerow([repr(float(v)) for v in row] + [repr(float(col[i])) for col in (extra or {}).values()])
    return out.getvalue()


def read_points_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CliError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    cols = [j for j, name in enumerate(header) if name.startswith("x")] or list(range(len(header)))
    try:
        return np.array([[float(r[j]) for j in cols] for r in body], dtype=np.float64).reshape(-1, len(cols))
    except ValueError as exc:
        raise CliError(f"{path}: non-numeric value ({exc})") from None


def scatter_svg(layers, size: int = 480) -> str:
    """SVG scatter of ``(points, colour)`` layers; 3-D points drop the middle axis."""

    def project(p):
        if p.shape[1] == 3:
            return p[:, [0, 2]]
        if p.shape[1] == 1:
            return np.column_stack([np.arange(len(p)), p[:, 0]])
        return p[:, :2]

    projected = [(project(np.asarray(p, dtype=np.float64)), c) for p, c in layers if len(p)]
    if projected:
        allp = np.vstack([p for p, _ in projected])
        lo, hi = allp.min(axis=0), allp.max(axis=0)
    else:
        lo, hi = np.zeros(2), np.ones(2)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pad = 10
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for pts, colour in projected:
        xy = pad + (pts - lo) / span * (size - 2 * pad)
        parts.append(f'<g fill="{colour}" fill-opacity="0.6">')
        for x, y in xy:
            parts.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="1.5"/>')
        parts.append("</g>")
    parts.append("</svg>\n")
    return "\n".join(parts)


def load_trained(path):
    """Rebuild a trainer (bundle plus optimizer state) from a checkpoint file."""
    try:
        tensors, meta = load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise CliError(f"{path}: {exc}") from None
    echo = {k[len("config.") :]: v for k, v in meta.items() if k.startswith("config.")}
    try:
        config = config_from_entries(echo)
    except ConfigError as exc:
        raise CliError(f"{path}: config echo is invalid: {exc}") from None
    data_dim = tensors["E.0.weight"].shape[0]
    bundle = build_bundle(
        data_dim, config.hp, config.width, config.depth, config.seed, config.decoder_activation
    )
    trainer = Trainer(config, bundle, data=np.zeros((config.hp.batch_size, data_dim)))
    trainer.load_state(tensors, meta)
    return trainer


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    if args.config is not None and not Path(args.config).is_file():
        raise CliError(f"config file not found: {args.config}", EXIT_USAGE)
    try:
        config, _ = load_config(args.config, args.set or (), args.seed)
    except ConfigError as exc:
        where = args.config or "--set"
        raise CliError(f"{where}: {exc}", EXIT_USAGE) from None
    run_dir = out_root(args.out) / run_dir_name(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    if config.checkpoint_path is None:
        config.checkpoint_path = str(run_dir / "last.ckpt")
    (run_dir / "config.txt").write_text(render_config(config))
    log.info("run directory %s", run_dir)

    trainer = Trainer(config)
    try:
        runlog, trainer, report = run_experiment(config, trainer)
    except TrainingDiverged as exc:
        (run_dir / "runlog.csv").write_text(trainer.runlog.to_csv())
        raise CliError(f"training diverged: {exc}") from None
    (run_dir / "runlog.csv").write_text(runlog.to_csv())
    (run_dir / "report.csv").write_text(report.to_csv(run_dir.name, config.stage_a_steps + config.stage_b_steps))
    trainer.save(run_dir / "final.ckpt", to_entries(config))
    print(run_dir)
    return 0


def cmd_generate(args) -> int:
    trainer = load_trained(args.ckpt)
    try:
        pts = generate(args.n, trainer.bundle, args.seed)
    except UntrainedModelError as exc:
        raise CliError(str(exc)) from None
    write_text(args.out, points_csv(pts, d=trainer.bundle.data_dim))
    if args.svg:
        Path(args.svg).write_text(scatter_svg([(pts, "#d62728")]))
    return 0


def cmd_reconstruct(args) -> int:
    trainer = load_trained(args.ckpt)
    x = read_points_csv(args.input)
    if x.shape[1] != trainer.bundle.data_dim:
        raise CliError(f"{args.input}: {x.shape[1]} columns, model expects {trainer.bundle.data_dim}")
    x_hat = reconstruct(x, trainer.bundle).astype(np.float64)
    per_row = np.mean((x - x_hat) ** 2, axis=1)
    write_text(args.out, points_csv(x_hat, {"mse": per_row}, d=x.shape[1]))
    if args.svg:
        Path(args.svg).write_text(scatter_svg([(x, "#999999"), (x_hat, "#1f77b4")]))
    return 0


def cmd_eval(args) -> int:
    trainer = load_trained(args.ckpt)
    report = trainer.evaluate()
    step = trainer.step_a + trainer.step_b
    write_text(args.out, report.to_csv(Path(args.ckpt).parent.name, step))
    return 0


def cmd_probe(args) -> int:
    if args.kind == "sphere":
        emp, pred = sphere_concentration_check(args.n, args.d, args.r, args.seed)
        text = "n,d,r,seed,empirical,predicted\n"
        text += f"{args.n},{args.d},{args.r!r},{args.seed},{emp!r},{pred!r}\n"
        write_text(args.out, text)
        return 0
    if args.kind == "kl-blowup":
        from .baselines import kl_blowup_probe, probe_rows_to_csv

        betas = [float(b) for b in args.betas.split(",")]
        data = np.random.default_rng(args.seed).uniform(0, 1, size=(args.samples, 1))
        rows = kl_blowup_probe(data, betas, steps=args.steps, seed=args.seed)
        write_text(args.out, probe_rows_to_csv(rows))
        return 0
    if args.kind == "gradcheck":
        from .verify import check_all_losses, check_all_primitives

        rows = check_all_primitives(args.cases, args.seed)
        if args.losses:
            rows += check_all_losses(args.cases, args.seed)
        text = "name,dtype,cases,max_error,tolerance,ok\n" + "".join(
            f"{r.name},{r.dtype},{r.cases},{r.max_error!r},{r.tolerance!r},{int(r.ok)}\n" for r in rows
        )
        write_text(args.out, text)
        return 0 if all(r.ok for r in rows) else 1
    raise CliError(f"unknown probe kind {args.kind!r}", EXIT_USAGE)


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(f"{self.prog}: {message}", EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentmatch", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run stage A and stage B, write a run directory")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output root (default: $LM_OUT_DIR or ./runs)")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample G(g(z)) from a checkpoint")
    g.add_argument("--ckpt", required=True)
    g.add_argument("-n", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="CSV path (default: stdout)")
    g.add_argument("--svg")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("reconstruct", help="reconstruct points from a CSV file")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out")
    r.add_argument("--svg")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="metric report for a checkpoint on held-out data")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("probe", help="numerical probes: kl-blowup, sphere, gradcheck")
    pr.add_argument("kind", choices=["kl-blowup", "sphere", "gradcheck"])
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out")
    pr.add_argument("--betas", default="1,0.3,0.1,0.03,0.01")
    pr.add_argument("--steps", type=int, default=3000)
    pr.add_argument("-n", type=int, default=64, help="sphere: points per set")
    pr.add_argument("--samples", type=int, default=1000, help="kl-blowup: uniform training samples")
    pr.add_argument("-d", type=int, default=1024)
    pr.add_argument("-r", type=float, default=1.0)
    pr.add_argument("--cases", type=int, default=100)
    pr.add_argument("--losses", action="store_true", help="gradcheck: include the training losses")
    pr.set_defaults(func=cmd_probe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
