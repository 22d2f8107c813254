"""Command line entry point: ``defpinn train|oracle|classify|export|gradcheck|pipeline``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .config import ConfigError, from_dict, load_config, profile
from .losses import LossConfig
from .model import load_checkpoint
from .training import gradient_check

log = logging.getLogger("defpinn")

LOG_ENV = "DEFPINN_LOG"


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _resolve(args):
    run = load_config(args.config) if args.config else from_dict({})
    out = Path(args.out or run.out_dir)
    return run, out


def _progress(every: int):
    def cb(epoch, lv):
        if epoch == 1 or epoch % every == 0:
            log.info("epoch %d total %.6g deflation %.4g", epoch, float(lv.value), float(lv.deflation))
    return cb


def cmd_train(args) -> int:
    run, out = _resolve(args)
    _, report, attempts = harness.run_training(run, out, _progress(args.log_every))
    log.info("final piml %s deflation %g", [round(float(v), 6) for v in report.piml_per_solution],
             report.deflation)
    return 0 if attempts[-1]["passed"] else 1


def cmd_oracle(args) -> int:
    run, out = _resolve(args)
    sols = harness.run_oracle(run, out)
    for lab in sols.labels():
        log.info("%s energy %.6f residual %.3g", lab, sols.energies[lab], sols.residuals[lab])
    return 0


def _oracle_for(run, oracle_dir: Path):
    if (oracle_dir / "oracle.json").exists():
        return harness.load_oracle(oracle_dir, run.ldg)
    return harness.run_oracle(run, oracle_dir)


def cmd_classify(args) -> int:
    run, out = _resolve(args)
    params, _, _ = load_checkpoint(Path(args.checkpoint or out / "checkpoint.npz"))
    sols = _oracle_for(run, Path(args.oracle_dir or out / "oracle"))
    trained = harness.sample_all(params, run.oracle.grid_size, run.ldg.trapezoid, run.loss.hard_constraint)
    report = harness.classify(trained, sols, run.ldg)
    harness.write_json(out / "classification.json", report.summary())
    for k, lab in enumerate(report.assignment):
        log.info("solution %d -> %s  rel. error %.4f  energy %.3f (oracle %.3f)", k, lab,
                 report.relative_errors[k], report.trained_energies[k], report.oracle_energies[k])
    return 0 if report.passed else 1


def cmd_export(args) -> int:
    run, out = _resolve(args)
    params, _, _ = load_checkpoint(Path(args.checkpoint or out / "checkpoint.npz"))
    M = args.grid_size or run.oracle.grid_size
    trained = harness.sample_all(params, M, run.ldg.trapezoid, run.loss.hard_constraint)
    harness.export_fields({f"solution_{k}": q for k, q in enumerate(trained)}, out / "fields", args.stride)
    return 0


def cmd_gradcheck(args) -> int:
    run = load_config(args.config) if args.config else profile("smoke")
    run = replace(run, model=replace(run.model, hidden_width=8, feature_count=3, solution_count=3),
                  grid=replace(run.grid, N=5))
    limits = {"l2": 1e-5, "l1": 1e-4}
    status = 0
    lines = []
    for norm, tol in limits.items():
        cfg = replace(run, loss=replace(run.loss, residual_norm=norm))
        err = gradient_check(cfg, args.trials)
        ok = err < tol
        status |= not ok
        lines.append(f"{norm}: max relative error {err:.3e} (limit {tol:g}) {'PASS' if ok else 'FAIL'}")
    cfg = replace(run, loss=LossConfig(alpha=0.0, beta=run.loss.beta, d_min=run.loss.d_min))
    err = gradient_check(cfg, args.trials)
    ok = err < 1e-6
    status |= not ok
    lines.append(f"deflation only: max relative error {err:.3e} (limit 1e-06) {'PASS' if ok else 'FAIL'}")
    print("\n".join(lines))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    return int(status)


def cmd_pipeline(args) -> int:
    run, out = _resolve(args)
    return harness.run_pipeline(run, out, skip_train=args.skip_train, callback=_progress(args.log_every))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defpinn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run configuration (default: desk profile)")
        p.add_argument("--out", help="output directory (default: the config's out_dir)")
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train the multi-solution model")
    p.add_argument("--log-every", type=int, default=500)
    add("oracle", cmd_oracle, "compute the six reference states with the finite-difference solver")
    p = add("classify", cmd_classify, "match trained solutions to oracle states")
    p.add_argument("--checkpoint")
    p.add_argument("--oracle-dir")
    p = add("export", cmd_export, "write CSV and SVG director plots of a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--grid-size", type=int)
    p.add_argument("--stride", type=int, default=2)
    p = add("gradcheck", cmd_gradcheck, "compare analytic gradients with finite differences")
    p.add_argument("--trials", type=int, default=20)
    p = add("pipeline", cmd_pipeline, "train, solve, classify and export")
    p.add_argument("--skip-train", action="store_true", help="reuse checkpoint.npz in the output directory")
    p.add_argument("--log-every", type=int, default=500)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, harness.PipelineError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
