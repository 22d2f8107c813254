"""End-to-end orchestration: sampling trained fields, classification against the oracle, exports."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .geometry import TrapezoidParams, cutoff_omega, extend_boundary
from .losses import LdGParams, energy
from .model import ModelParams, field_values, load_checkpoint, save_checkpoint
from .oracle import LABELS, SolutionSet, find_all
from .qfield import QField, apply_boundary, lattice
from .training import history_header, train

log = logging.getLogger(__name__)

REL_ERROR_TOL = 0.15
ENERGY_REL_TOL = 0.10
PIML_DECREASE = 100.0


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def sample_model(params: ModelParams, k: int, M: int, trap: TrapezoidParams,
                 hard_constraint: bool = True) -> QField:
    """Evaluate solution ``k`` on the ``M x M`` lattice of the unit square."""
    if not 0 <= k < params.solution_count:
        raise IndexError(f"solution index {k} out of range")
    X, Y = lattice(M)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    if hard_constraint:
        qb = np.asarray(extend_boundary(pts[:, 0], pts[:, 1], trap))
        om = cutoff_omega(pts[:, 0], pts[:, 1])[0]
    else:
        qb, om = np.zeros(len(pts)), np.ones(len(pts))
    g1, g2 = field_values(params, pts, qb, om)
    q = QField(g1[:, k].reshape(M, M), g2[:, k].reshape(M, M))
    return apply_boundary(q, trap) if hard_constraint else q


def sample_all(params: ModelParams, M: int, trap: TrapezoidParams, hard_constraint: bool = True):
    return [sample_model(params, k, M, trap, hard_constraint) for k in range(params.solution_count)]


@dataclass
class ClassificationReport:
    assignment: list           # assignment[i] = oracle label of trained solution i
    relative_errors: list
    trained_energies: list
    oracle_energies: list
    error_pass: list
    energy_pass: list

    @property
    def bijective(self) -> bool:
        return sorted(self.assignment) == sorted(LABELS[:len(self.assignment)])

    @property
    def passed(self) -> bool:
        return self.bijective and all(self.error_pass) and all(self.energy_pass)

    def summary(self) -> dict:
        return {"assignment": self.assignment,
                "relative_errors": [float(v) for v in self.relative_errors],
                "trained_energies": [float(v) for v in self.trained_energies],
                "oracle_energies": [float(v) for v in self.oracle_energies],
                "error_pass": self.error_pass, "energy_pass": self.energy_pass,
                "bijective": self.bijective, "passed": self.passed}


def classify(trained: list, oracle: SolutionSet, ldg: LdGParams | None = None,
             tol: float = REL_ERROR_TOL, energy_tol: float = ENERGY_REL_TOL) -> ClassificationReport:
    """Match trained fields to oracle labels by exhaustive search over all assignments.

    The assignment minimises the summed full-field L2 distance; ties go to the
    lexicographically first permutation.
    """
    labels = oracle.labels()
    if len(trained) != len(labels):
        raise ValueError(f"need {len(labels)} trained fields, got {len(trained)}")
    if any(q.M != oracle[labels[0]].M for q in trained):
        raise ValueError("trained and oracle fields must share the lattice size")
    ldg = ldg or LdGParams()
    cost = np.array([[q.l2_distance(oracle[lab]) for lab in labels] for q in trained])
    best, best_cost = None, math.inf
    for perm in itertools.permutations(range(len(labels))):
        c = sum(cost[i, j] for i, j in enumerate(perm))
        if c < best_cost:
            best, best_cost = perm, c
    assignment = [labels[j] for j in best]
    rel = [cost[i, j] / oracle[labels[j]].l2_norm() for i, j in enumerate(best)]
    e_tr = [energy(q, ldg) for q in trained]
    e_or = [oracle.energies[lab] for lab in assignment]
    return ClassificationReport(assignment, rel, e_tr, e_or,
                                [bool(r <= tol) for r in rel],
                                [bool(abs(a - b) <= energy_tol * abs(b)) for a, b in zip(e_tr, e_or)])


# ---------------------------------------------------------------- exports

def export_csv(q: QField, path) -> None:
    """Write ``x,y,q11,q12`` rows in y-major order with round-trip precision."""
    X, Y = lattice(q.M)
    data = np.stack([X.ravel(), Y.ravel(), q.q11.ravel(), q.q12.ravel()], axis=1)
    with open(path, "w", newline="") as fh:
        fh.write("x,y,q11,q12\n")
        np.savetxt(fh, data, fmt="%.17g", delimiter=",")


def import_csv(path) -> QField:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    M = int(round(math.sqrt(data.shape[0])))
    if M * M != data.shape[0]:
        raise ValueError(f"{path}: row count {data.shape[0]} is not a square")
    return QField(data[:, 2].reshape(M, M), data[:, 3].reshape(M, M))


def director_segments(q: QField, stride: int = 1, size: float = 600.0):
    """Line segments ``(x1, y1, x2, y2)`` in SVG pixel coordinates (y pointing down)."""
    if stride < 1:
        raise ValueError("stride must be at least 1")
    M = q.M
    margin = size * 0.05
    scale = (size - 2 * margin) / (M - 1)
    cell = scale * stride
    segs = []
    for iy in range(0, M, stride):
        for ix in range(0, M, stride):
            a, b = q.q11[iy, ix], q.q12[iy, ix]
            theta = 0.5 * math.atan2(b, a)
            half = 0.5 * cell * min(math.hypot(a, b), 1.0) * 0.9
            cx = margin + ix * scale
            cy = size - margin - iy * scale
            dx, dy = half * math.cos(theta), -half * math.sin(theta)
            segs.append((cx - dx, cy - dy, cx + dx, cy + dy))
    return segs


def export_svg_director(q: QField, path, stride: int = 1, size: float = 600.0) -> None:
    """Standalone SVG with one unoriented segment per sampled node."""
    segs = director_segments(q, stride, size)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:g}" height="{size:g}" '
             f'viewBox="0 0 {size:g} {size:g}">',
             f'<rect x="0" y="0" width="{size:g}" height="{size:g}" fill="white"/>',
             '<g stroke="black" stroke-width="1.5" stroke-linecap="round">']
    lines += [f'<line x1="{x1:.3f}" y1="{y1:.3f}" x2="{x2:.3f}" y2="{y2:.3f}"/>' for x1, y1, x2, y2 in segs]
    lines += ["</g>", "</svg>", ""]
    Path(path).write_text("\n".join(lines))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_history(path, history, K: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(history_header(K))
        for row in history:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def write_timing(path, timing) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "wall_clock_s"])
        for e, t in enumerate(timing, start=1):
            w.writerow([e, f"{t:.6f}"])


def read_history(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], [[float(v) for v in r] for r in rows[1:]]


# ---------------------------------------------------------------- stages

def piml_decrease(report) -> list:
    """Per-solution ratio of the epoch-1 PIML loss to the final one."""
    if not report.history:
        return []
    first = report.history[0][2:-1]
    return [a / b if b > 0 else math.inf for a, b in zip(first, report.piml_per_solution)]


def training_ok(report) -> bool:
    ratios = piml_decrease(report)
    return report.deflation == 0.0 and bool(ratios) and min(ratios) >= PIML_DECREASE


def run_training(run: RunConfig, out: Path, callback=None):
    """Train with up to ``run.max_attempts`` consecutive seeds; write the run directory.

    Returns ``(params, report, attempts)`` of the last attempt.
    """
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", run.to_dict())
    attempts = []
    for attempt in range(run.max_attempts):
        seeded = run.with_seed(run.seed + attempt)
        params, report = train(seeded, callback)
        ok = training_ok(report)
        attempts.append({"seed": seeded.seed, "deflation": report.deflation,
                         "piml_decrease": [float(r) for r in piml_decrease(report)], "passed": ok})
        log.info("training attempt %d (seed %d): %s", attempt + 1, seeded.seed, "ok" if ok else "stalled")
        if ok:
            break
    K = run.model.solution_count
    write_history(out / "history.csv", report.history, K)
    write_timing(out / "timing.csv", report.timing)
    save_checkpoint(out / "checkpoint.npz", params, seeded.model, {"seed": seeded.seed})
    write_json(out / "train_report.json", {"train": report.summary(), "attempts": attempts})
    write_json(out / "timing.json", {"wall_clock_s": report.wall_clock})
    return params, report, attempts


def run_oracle(run: RunConfig, out: Path) -> SolutionSet:
    out.mkdir(parents=True, exist_ok=True)
    sols = find_all(run.oracle, run.ldg)
    for lab in sols.labels():
        export_csv(sols[lab], out / f"{lab}.csv")
    write_json(out / "oracle.json", sols.summary())
    return sols


def load_oracle(out: Path, ldg: LdGParams) -> SolutionSet:
    """Rebuild a :class:`SolutionSet` from the CSV files written by :func:`run_oracle`."""
    summary = json.loads((out / "oracle.json").read_text())
    sols = {lab: import_csv(out / f"{lab}.csv") for lab in summary["labels"]}
    return SolutionSet(sols, summary["energies"], summary["residuals"],
                       np.array(summary["distance_matrix"]))


def export_fields(fields: dict, out: Path, stride: int = 2) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, q in fields.items():
        export_csv(q, out / f"{name}.csv")
        export_svg_director(q, out / f"{name}.svg", stride)


def run_pipeline(run: RunConfig, out=None, skip_train: bool = False, callback=None) -> int:
    """Train, solve the oracle, classify and export; returns a process exit status."""
    out = Path(out or run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trap = run.ldg.trapezoid
    hard = run.loss.hard_constraint
    if skip_train:
        ckpt = out / "checkpoint.npz"
        if not ckpt.exists():
            raise PipelineError("train", f"--skip-train given but {ckpt} does not exist")
        params, _, _ = load_checkpoint(ckpt)
        prev = json.loads((out / "train_report.json").read_text())
        train_summary, attempts = prev["train"], prev["attempts"]
        train_ok = bool(attempts and attempts[-1]["passed"])
    else:
        try:
            params, report, attempts = run_training(run, out, callback)
        except Exception as exc:
            raise PipelineError("train", str(exc)) from exc
        train_summary, train_ok = report.summary(), attempts[-1]["passed"]
    try:
        sols = run_oracle(run, out / "oracle")
    except Exception as exc:
        raise PipelineError("oracle", str(exc)) from exc
    M = run.oracle.grid_size
    trained = sample_all(params, M, trap, hard)
    try:
        cls = classify(trained, sols, run.ldg)
    except Exception as exc:
        raise PipelineError("classify", str(exc)) from exc
    export_fields({f"trained_{k}_{lab}": q for k, (q, lab) in enumerate(zip(trained, cls.assignment))},
                  out / "fields")
    export_fields({f"oracle_{lab}": sols[lab] for lab in sols.labels()}, out / "fields")
    acceptance = {"training": train_ok, "classification": cls.bijective and all(cls.error_pass),
                  "energy": all(cls.energy_pass)}
    write_json(out / "report.json", {"train": train_summary, "attempts": attempts,
                                     "oracle": sols.summary(), "classification": cls.summary(),
                                     "acceptance": acceptance})
    return 0 if all(acceptance.values()) else 1
