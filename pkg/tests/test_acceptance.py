"""Acceptance suite: one test per criterion at the stated tolerances.

Criteria 4-7 share a full desk-profile pipeline run (H = 512, 10000 epochs,
up to three seeds), repeated once for the determinism check; expect a run time
of one to two hours on a single core. Set ``DEFPINN_ACCEPTANCE_DIR`` to keep
the run directories.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from defpinn.config import from_dict
from defpinn.geometry import boundary_constants, boundary_q1
from defpinn.harness import run_pipeline
from defpinn.losses import LdGParams, LossConfig, energy
from defpinn.model import ModelConfig, ModelParams
from defpinn.oracle import LABELS, OracleConfig, find_all, is_diagonal
from defpinn.qfield import QField
from defpinn.training import gradient_check

GRAD_TOL_L2 = 1e-5
GRAD_TOL_L1 = 1e-4
GRAD_RUNTIME = 60.0
BOUNDARY_TOL = 1e-9
ORACLE_RESIDUAL = 1e-8
SYMMETRY_TOL = 1e-6
ORACLE_RUNTIME = 600.0
PIML_DECREASE = 100.0
TRAIN_RUNTIME = 3600.0 * 1.1  # "about one hour" per training attempt sequence
REL_ERROR_TOL = 0.15  # engineering tolerance: the paper compares visually only
ENERGY_TOL = 0.10


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_gate():
    base = from_dict({"profile": "smoke", "model": {"hidden_width": 8, "feature_count": 3, "solution_count": 3},
                      "grid": {"N": 5}})
    t0 = time.perf_counter()
    errs = {}
    for norm in ("l2", "l1"):
        run = from_dict(base.to_dict() | {"loss": base.to_dict()["loss"] | {"residual_norm": norm}})
        errs[norm] = gradient_check(run, trials=20)
    elapsed = time.perf_counter() - t0
    ok = errs["l2"] < GRAD_TOL_L2 and errs["l1"] < GRAD_TOL_L1 and elapsed < GRAD_RUNTIME
    report(1, ok, f"max rel. error l2 {errs['l2']:.2e} (< {GRAD_TOL_L2:g}), l1 {errs['l1']:.2e} "
                  f"(< {GRAD_TOL_L1:g}), {elapsed:.1f} s (< {GRAD_RUNTIME:g} s)")


# ---------------------------------------------------------------- 2

def test_criterion_2_boundary_exactness():
    from defpinn.model import field_values
    trap = LdGParams().trapezoid
    rng = np.random.default_rng(2024)
    t = rng.uniform(0, 1, 1000)
    edge = rng.integers(0, 4, 1000)
    pts = np.stack([np.choose(edge, [t, np.ones_like(t), t, np.zeros_like(t)]),
                    np.choose(edge, [np.zeros_like(t), t, np.ones_like(t), t])], axis=1)
    bc = boundary_constants(pts, trap, derivatives=False)
    target = boundary_q1(pts[:, 0], pts[:, 1], trap)
    cfg = ModelConfig()
    H, p, K = cfg.hidden_width, cfg.feature_count, cfg.solution_count
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(10):
        params = ModelParams(W=rng.normal(0, 3, (H, 2)), zeta=rng.normal(0, 1, H), V=rng.normal(0, 1, (p, H)),
                             U=rng.normal(0, 1, (p, 2)), c=rng.normal(0, 1, p), B=rng.normal(0, 1, (K, 2 * p)))
        g1, g2 = field_values(params, pts, bc.qb_value, bc.omega_value)
        worst = max(worst, np.abs(g1 - target[:, None]).max(), np.abs(g2).max())
    report(2, worst < BOUNDARY_TOL, f"max boundary deviation {worst:.2e} (< {BOUNDARY_TOL:g}) "
                                    f"in {time.perf_counter() - t0:.1f} s")


# ---------------------------------------------------------------- 3

def test_criterion_3_oracle_completeness():
    t0 = time.perf_counter()
    sols = find_all(OracleConfig(grid_size=65, epsilon=0.02))
    elapsed = time.perf_counter() - t0
    labels = sols.labels()
    n_diag = sum(is_diagonal(sols[lab]) for lab in labels)
    worst_res = max(sols.residuals.values())
    sym = 0.0
    for lab in labels:
        for op in ("reflect_x", "reflect_y", "transpose"):
            img = getattr(sols[lab], op)()
            sym = max(sym, min(max(np.abs(img.q11 - sols[m].q11).max(), np.abs(img.q12 - sols[m].q12).max())
                               for m in labels))
    ok = (len(labels) == 6 and worst_res < ORACLE_RESIDUAL and sym < SYMMETRY_TOL and n_diag == 2
          and elapsed < ORACLE_RUNTIME)
    report(3, ok, f"{len(labels)} states ({n_diag} diagonal, {len(labels) - n_diag} rotated), "
                  f"max residual {worst_res:.1e} (< {ORACLE_RESIDUAL:g}), symmetry defect {sym:.1e} "
                  f"(< {SYMMETRY_TOL:g}), {elapsed:.0f} s (< {ORACLE_RUNTIME:g} s)")


# ---------------------------------------------------------------- 4-7: full pipeline

@pytest.fixture(scope="module")
def acceptance_runs(tmp_path_factory):
    root = os.environ.get("DEFPINN_ACCEPTANCE_DIR")
    root = Path(root) if root else tmp_path_factory.mktemp("acceptance")
    run = from_dict({"profile": "desk"})
    out = {}
    for name in ("first", "repeat"):
        t0 = time.perf_counter()
        status = run_pipeline(run, root / name)
        out[name] = {"dir": root / name, "status": status, "seconds": time.perf_counter() - t0,
                     "report": json.loads((root / name / "report.json").read_text())}
    return out


def test_criterion_4_deflation_pinn_reproduction(acceptance_runs):
    first = acceptance_runs["first"]
    rep = first["report"]
    attempts = rep["attempts"]
    last = attempts[-1]
    train_seconds = json.loads((first["dir"] / "timing.json").read_text())["wall_clock_s"]
    decrease = min(last["piml_decrease"])
    ok = (last["deflation"] == 0.0 and decrease >= PIML_DECREASE and len(attempts) <= 3
          and train_seconds <= TRAIN_RUNTIME)
    tried = ", ".join(f"seed {a['seed']}: deflation {a['deflation']:.3g}, "
                      f"min PIML decrease {min(a['piml_decrease']):.1f}x" for a in attempts)
    report(4, ok, f"{len(attempts)} attempt(s) [{tried}]; need deflation 0 and decrease >= "
                  f"{PIML_DECREASE:g}x; last training {train_seconds:.0f} s")


def test_criterion_5_classification(acceptance_runs):
    cls = acceptance_runs["first"]["report"]["classification"]
    errs = cls["relative_errors"]
    bijective = sorted(cls["assignment"]) == sorted(LABELS)
    ok = bijective and max(errs) <= REL_ERROR_TOL
    pairs = ", ".join(f"{k}->{lab} {e:.3f}" for k, (lab, e) in enumerate(zip(cls["assignment"], errs)))
    report(5, ok, f"bijective={bijective}; relative L2 errors [{pairs}] (<= {REL_ERROR_TOL:g})")


def test_criterion_6_energy_sanity(acceptance_runs):
    cls = acceptance_runs["first"]["report"]["classification"]
    rel = [abs(a - b) / abs(b) for a, b in zip(cls["trained_energies"], cls["oracle_energies"])]
    ldg = LdGParams(0.02)
    M = 65
    e_one = energy(QField(np.ones((M, M)), np.zeros((M, M))), ldg)
    e_zero = energy(QField(np.zeros((M, M)), np.zeros((M, M))), ldg)
    spot = e_one == 0.0 and abs(e_zero - 2500.0) <= 2500.0 / (M - 1) ** 2
    ok = spot and max(rel) <= ENERGY_TOL
    report(6, ok, f"energy rel. deviations {[round(r, 3) for r in rel]} (<= {ENERGY_TOL:g}); "
                  f"spot checks E(1,0)={e_one:g}, E(0,0)={e_zero:.6g}")


def test_criterion_7_determinism(acceptance_runs):
    a, b = acceptance_runs["first"]["dir"], acceptance_runs["repeat"]["dir"]
    same = {name: (a / name).read_bytes() == (b / name).read_bytes() for name in ("history.csv", "report.json")}
    report(7, all(same.values()), f"bitwise identical on repeat: {same}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
