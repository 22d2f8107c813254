import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from defpinn import harness
from defpinn.config import ConfigError, from_dict, load_config, profile
from defpinn.geometry import extend_boundary
from defpinn.harness import (PipelineError, classify, director_segments, export_csv, export_svg_director,
                             import_csv, run_pipeline, sample_model)
from defpinn.model import ModelConfig, init_params
from defpinn.oracle import LABELS, SolutionSet
from defpinn.qfield import QField, apply_boundary, boundary_mask, lattice


def params(K=6, seed=0):
    return init_params(ModelConfig(hidden_width=16, feature_count=4, solution_count=K, init_seed=seed))


# ---------------------------------------------------------------- config

def test_empty_config_is_desk_profile(tmp_path):
    (tmp_path / "c.json").write_text("")
    run = load_config(tmp_path / "c.json")
    assert run.profile == "desk" and run.model.hidden_width == 512 and run.grid.N == 33


def test_paper_profile_values():
    run = profile("paper")
    assert run.ldg.epsilon == 0.02 and run.loss.d_min == 0.4 and run.loss.alpha == 0.02 and run.loss.beta == 2
    assert run.grid.N == 33 and run.model.feature_count == 16 and run.model.solution_count == 6
    assert run.model.hidden_width == 4000 and run.optimizer.epochs == 10000
    assert run.optimizer.learning_rate == 1e-3
    assert run.ldg.trapezoid.d == pytest.approx(0.06)


@pytest.mark.parametrize("raw", [{"loss": {"d_min": -1}}, {"bogus": 1}, {"model": {"width": 3}},
                                 {"profile": "huge"}, {"oracle": {"epsilon": 0.05}}, {"seed": "x"},
                                 {"model": {"solution_count": 1}}, {"max_attempts": 0}, {"loss": []}])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        from_dict(raw)


def test_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")


def test_seed_and_epsilon_are_wired():
    run = from_dict({"seed": 5, "ldg": {"epsilon": 0.03}})
    assert run.model.init_seed == 5 and run.oracle.epsilon == 0.03
    assert run.with_seed(7).model.init_seed == 7
    assert from_dict(run.to_dict() | {"profile": "desk"}).to_dict() == run.to_dict()


# ---------------------------------------------------------------- sampling

def test_sampled_boundary_rows_are_exact(trap):
    q = sample_model(params(), 2, 33, trap)
    ref = apply_boundary(QField(np.zeros((33, 33)), np.zeros((33, 33))), trap)
    mask = boundary_mask(33)
    assert np.array_equal(q.q11[mask], ref.q11[mask]) and np.array_equal(q.q12[mask], ref.q12[mask])


def test_zero_branch_samples_the_extension(trap):
    p = params()
    p.B[0] = 0
    q = sample_model(p, 0, 17, trap)
    X, Y = lattice(17)
    assert np.allclose(q.q11, extend_boundary(X, Y, trap), atol=1e-15) and np.all(q.q12 == 0)


def test_resampling_restricts_exactly(trap):
    p = params(seed=3)
    coarse = sample_model(p, 1, 33, trap)
    fine = sample_model(p, 1, 65, trap)
    assert np.array_equal(fine.q11[::2, ::2], coarse.q11) and np.array_equal(fine.q12[::2, ::2], coarse.q12)


def test_sample_index_error(trap):
    with pytest.raises(IndexError):
        sample_model(params(), 6, 17, trap)


# ---------------------------------------------------------------- classification

def test_classify_identity(oracle_set):
    trained = [oracle_set[lab] for lab in LABELS]
    rep = classify(trained, oracle_set)
    assert rep.assignment == list(LABELS) and rep.relative_errors == [0.0] * 6
    assert rep.passed and rep.bijective


def test_classify_recovers_a_permutation(oracle_set):
    order = ["R3", "D2", "R1", "R4", "D1", "R2"]
    rep = classify([oracle_set[lab] for lab in order], oracle_set)
    assert rep.assignment == order


def test_classify_is_invariant_under_relabelling(oracle_set, rng):
    trained = [QField(oracle_set[lab].q11 + 0.05 * rng.standard_normal((65, 65)), oracle_set[lab].q12)
               for lab in LABELS]
    perm = [3, 0, 5, 1, 4, 2]
    a = classify(trained, oracle_set)
    b = classify([trained[i] for i in perm], oracle_set)
    assert b.assignment == [a.assignment[i] for i in perm]
    assert b.relative_errors == [a.relative_errors[i] for i in perm]


def test_classify_noise_injection(oracle_set, rng):
    eta = 0.01
    trained = [QField(oracle_set[lab].q11 + rng.uniform(-eta, eta, (65, 65)),
                      oracle_set[lab].q12 + rng.uniform(-eta, eta, (65, 65))) for lab in LABELS]
    rep = classify(trained, oracle_set)
    assert rep.assignment == list(LABELS)
    for lab, err in zip(LABELS, rep.relative_errors):
        ref = eta / oracle_set[lab].l2_norm()
        assert ref / 3 <= err <= 3 * ref


def test_classify_flags_collapsed_solutions(oracle_set):
    trained = [oracle_set["D1"]] * 6
    rep = classify(trained, oracle_set)
    assert rep.bijective  # the assignment is always a permutation
    assert not rep.passed and sum(rep.error_pass) == 1


def test_classify_requires_matching_sizes(oracle_set):
    with pytest.raises(ValueError):
        classify([QField(np.zeros((17, 17)), np.zeros((17, 17)))] * 6, oracle_set)
    with pytest.raises(ValueError):
        classify([oracle_set["D1"]] * 5, oracle_set)


# ---------------------------------------------------------------- exports

def test_csv_round_trip(tmp_path, rng):
    q = QField(rng.standard_normal((9, 9)), rng.standard_normal((9, 9)) * 1e-7)
    export_csv(q, tmp_path / "q.csv")
    back = import_csv(tmp_path / "q.csv")
    assert np.array_equal(back.q11, q.q11) and np.array_equal(back.q12, q.q12)
    lines = (tmp_path / "q.csv").read_text().splitlines()
    assert lines[0] == "x,y,q11,q12" and len(lines) == 82


def test_csv_order_is_y_major(tmp_path):
    q = QField(np.arange(9.0).reshape(3, 3), np.zeros((3, 3)))
    export_csv(q, tmp_path / "q.csv")
    rows = [list(map(float, r.split(","))) for r in (tmp_path / "q.csv").read_text().splitlines()[1:]]
    assert [(r[0], r[1]) for r in rows] == [(x, y) for y in (0, 0.5, 1) for x in (0, 0.5, 1)]
    assert [r[2] for r in rows] == list(range(9))


def test_csv_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        export_csv(QField(np.zeros((3, 3)), np.zeros((3, 3))), tmp_path / "missing" / "q.csv")


@pytest.mark.parametrize("q11, q12, angle", [(1.0, 0.0, 0.0), (-1.0, 0.0, 90.0), (0.0, 1.0, 45.0)])
def test_director_segment_angles(q11, q12, angle):
    q = QField(np.full((5, 5), q11), np.full((5, 5), q12))
    for x1, y1, x2, y2 in director_segments(q):
        # svg y points down, so flip the sign of dy
        a = math.degrees(math.atan2(-(y2 - y1), x2 - x1)) % 180
        assert a == pytest.approx(angle, abs=1e-9) or a == pytest.approx(angle + 180, abs=1e-9)


def test_svg_is_valid_and_strided(tmp_path):
    q = QField(np.ones((9, 9)), np.zeros((9, 9)))
    export_svg_director(q, tmp_path / "q.svg", stride=2)
    root = ET.parse(tmp_path / "q.svg").getroot()
    lines = root.findall(".//{http://www.w3.org/2000/svg}line")
    assert len(lines) == 25
    assert all("marker-end" not in ln.attrib for ln in lines)
    cell = (600 * 0.9) / 8 * 2
    lengths = [float(ln.get("x2")) - float(ln.get("x1")) for ln in lines]
    assert max(lengths) <= cell
    with pytest.raises(ValueError):
        export_svg_director(q, tmp_path / "r.svg", stride=0)


# ---------------------------------------------------------------- pipeline

def smoke_config(tmp_path):
    path = tmp_path / "smoke.json"
    path.write_text(json.dumps({"profile": "smoke", "max_attempts": 1, "optimizer": {"epochs": 20}}))
    return load_config(path)


def test_pipeline_writes_the_run_directory(tmp_path):
    run = smoke_config(tmp_path)
    status = run_pipeline(run, tmp_path / "run")
    out = tmp_path / "run"
    assert status == 1  # a 20-epoch smoke run cannot meet the acceptance thresholds
    for name in ("config.json", "history.csv", "checkpoint.npz", "report.json", "timing.csv"):
        assert (out / name).exists()
    report = json.loads((out / "report.json").read_text())
    assert set(report) == {"train", "attempts", "oracle", "classification", "acceptance"}
    assert len(report["attempts"]) == 1 and report["oracle"]["labels"] == list(LABELS)
    assert len((out / "history.csv").read_text().splitlines()) == 21
    assert len(list((out / "fields").glob("*.svg"))) == 12


def test_pipeline_is_reproducible_and_reuses_checkpoints(tmp_path):
    run = smoke_config(tmp_path)
    run_pipeline(run, tmp_path / "a")
    run_pipeline(run, tmp_path / "b")
    files = sorted(f.relative_to(tmp_path / "a") for f in (tmp_path / "a").rglob("*") if f.is_file())
    assert [f.relative_to(tmp_path / "b") for f in sorted((tmp_path / "b").rglob("*")) if f.is_file()] == files
    for name in files:
        if not name.name.startswith("timing"):  # wall-clock sidecars
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    before = (tmp_path / "a" / "report.json").read_bytes()
    run_pipeline(run, tmp_path / "a", skip_train=True)
    assert (tmp_path / "a" / "report.json").read_bytes() == before


def test_skip_train_without_checkpoint(tmp_path):
    with pytest.raises(PipelineError, match="train"):
        run_pipeline(smoke_config(tmp_path), tmp_path / "empty", skip_train=True)


def test_oracle_round_trip(tmp_path, oracle_set):
    for lab in LABELS:
        export_csv(oracle_set[lab], tmp_path / f"{lab}.csv")
    harness.write_json(tmp_path / "oracle.json", oracle_set.summary())
    back = harness.load_oracle(tmp_path, None)
    assert isinstance(back, SolutionSet) and back.labels() == list(LABELS)
    assert np.array_equal(back["R2"].q12, oracle_set["R2"].q12)
