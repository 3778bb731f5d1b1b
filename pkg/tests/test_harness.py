import csv
import dataclasses
import io
import json

import numpy as np
import pytest

from taabench import harness
from taabench.attacks import ATTACKS
from taabench.config import NUM_CLASSES, RUN_LOG_NAME
from taabench.errors import BudgetViolationError
from taabench.experiment_config import parse_plan
from taabench.model_zoo import Model
from taabench.utils.report_files import NA, recompute_asr
from taabench.utils.seeding import pick_samples, sample_seed
from tests.conftest import LINEAR, PIXELS

SAMPLES = 8


def _plan(attacks, extra_models=(), threads=2, seed=3):
    return parse_plan({
        "dataset": {"seed": 7, "n_train": 300, "n_test": 60},
        "models": [{"name": "m", "arch": "mlp-256"}, {"name": "a", "arch": "tinycnn-a"}, *extra_models],
        "attacks": [{"name": name} for name in attacks],
        "budget": {"epsilon": 8 / 255, "iterations": 3},
        "run": {"samples": SAMPLES, "seed": seed, "threads": threads},
    })


@pytest.fixture
def roster(mlp, cnn_a):
    return {"m": mlp, "a": cnn_a}


def _bench(plan, roster, data, out_dir=None, threads=None):
    return harness.run(plan, threads=threads, out_dir=out_dir, roster=roster, data=data)


def test_identity_attack_fools_nobody(roster, small_data):
    report = _bench(_plan(["identity"]), roster, small_data)
    for cell in report.cells:
        assert cell.asr in (0.0, None)
        assert cell.fooled == 0
    assert all(r.stationary and r.linf == 0.0 for row in report.rows for r in row.records)


def test_white_box_cell_matches_surrogate_outcome(roster, small_data):
    report = _bench(_plan(["ifgsm"]), roster, small_data)
    row = next(r for r in report.rows if r.surrogate == "m")
    fooled = sum(1 for r in row.records if r.target_clean["m"] == r.label and r.surrogate_after != r.label)
    assert report.cell("ifgsm", "m", "m").fooled == fooled


def test_matrix_has_one_row_per_attack_and_surrogate(roster, small_data):
    report = _bench(_plan(["identity", "ifgsm", "mifgsm"]), roster, small_data)
    rows = list(csv.reader(io.StringIO(harness.matrix_csv(report))))
    assert rows[0] == ["attack", "surrogate", "m", "a"]
    assert len(rows) == 3 * 2 + 1
    assert [r[:2] for r in rows[1:3]] == [["identity", "m"], ["identity", "a"]]


def test_json_records_reproduce_every_cell(roster, small_data):
    report = _bench(_plan(["ifgsm", "mifgsm"]), roster, small_data)
    document = json.loads(harness.report_json(report))
    for cell in report.cells:
        assert recompute_asr(document, cell.attack, cell.surrogate, cell.target) == cell.asr
    assert document["plan"]["run"]["seed"] == 3
    assert len(document["rows"][0]["records"]) == SAMPLES


def test_report_does_not_depend_on_thread_count(roster, small_data):
    plan = _plan(["difgsm", "ifgsm"])
    single = _bench(plan, roster, small_data, threads=1)
    many = _bench(plan, roster, small_data, threads=3)
    assert harness.matrix_csv(single) == harness.matrix_csv(many)
    for a, b in zip(single.rows, many.rows):
        assert [r.linf for r in a.records] == [r.linf for r in b.records]


def test_target_without_correct_samples_gives_na(roster, small_data):
    picked = pick_samples(len(small_data.test_labels), SAMPLES, 3)
    absent = next(c for c in range(NUM_CLASSES) if c not in set(small_data.test_labels[picked]))
    bias = np.zeros(NUM_CLASSES)
    bias[absent] = 50.0
    constant = Model(LINEAR, {"fc.w": np.zeros((PIXELS, NUM_CLASSES)), "fc.b": bias}, name="constant")
    plan = _plan(["ifgsm"], extra_models=[{"name": "constant", "arch": "mlp-256", "role": "target"}])
    report = _bench(plan, {**roster, "constant": constant}, small_data)
    assert report.cell("ifgsm", "m", "constant").asr is None
    assert report.cell("ifgsm", "m", "constant").clean_correct == 0
    assert harness.matrix_csv(report).splitlines()[1].endswith(f",{NA}")


def test_ensemble_records_every_member_prediction(roster, small_data):
    report = _bench(_plan(["ensemble"]), roster, small_data)
    for row in report.rows:
        assert len(row.members) == 2
        for record in row.records:
            assert len(record.member_preds) == 2
            assert all(len(pair) == 2 for pair in record.member_preds.values())


def test_directional_checks_are_recorded(roster, small_data):
    report = _bench(_plan(["ifgsm", "mifgsm"]), roster, small_data)
    pairs = {(f["surrogate"], f["target"]) for f in report.flags}
    assert pairs <= {("m", "a"), ("a", "m")}
    assert all(f["attack"] == "mifgsm" and f["baseline"] == "ifgsm" for f in report.flags)


def test_run_log_records_each_bench(tmp_path, roster, small_data):
    _bench(_plan(["identity"]), roster, small_data, out_dir=tmp_path)
    entries = [json.loads(line) for line in (tmp_path / RUN_LOG_NAME).read_text().splitlines()]
    assert len(entries) == 1
    assert entries[0]["success"] is True and entries[0]["seed"] == 3


def test_budget_violation_aborts_the_run(tmp_path, monkeypatch, roster, small_data):
    original = ATTACKS["identity"].craft

    def overshoot(ctx, x, y, rng):
        example = original(ctx, x, y, rng)
        example.x_adv = np.clip(x + 0.5, 0.0, 1.0)
        return example

    monkeypatch.setitem(ATTACKS, "identity", dataclasses.replace(ATTACKS["identity"], craft=overshoot))
    with pytest.raises(BudgetViolationError):
        _bench(_plan(["identity"]), roster, small_data, out_dir=tmp_path)
    entry = json.loads((tmp_path / RUN_LOG_NAME).read_text().splitlines()[-1])
    assert entry["success"] is False and "identity" in entry["error"]


def test_write_report_names_the_failing_path(tmp_path, roster, small_data):
    report = _bench(_plan(["identity"]), roster, small_data)
    written = harness.write_report(report, tmp_path / "out")
    assert sorted(written) == sorted(harness.REPORT_FILES)
    blocker = tmp_path / "blocked"
    blocker.write_text("not a directory")
    with pytest.raises(OSError) as info:
        harness.write_report(report, blocker)
    assert "blocked" in str(info.value)


def test_sample_seeds_are_position_independent():
    assert sample_seed(1, 5, "ssa") == sample_seed(1, 5, "ssa")
    assert sample_seed(1, 5, "ssa") != sample_seed(1, 6, "ssa")
    assert sample_seed(1, 5, "ssa") != sample_seed(1, 5, "mifgsm")
    assert list(pick_samples(5, 10, 0)) == [0, 1, 2, 3, 4]


def _every_attack(samples, seed):
    attacks = []
    for name in ATTACKS:
        entry = {"name": name}
        if name in ("advgan", "ge-advgan"):
            entry["train"] = {"epochs": 1, "batch_size": 50}
        attacks.append(entry)
    return parse_plan({
        "dataset": {"seed": 7, "n_train": 300, "n_test": 60},
        "models": [{"name": "m", "arch": "mlp-256"}, {"name": "a", "arch": "tinycnn-a"}],
        "attacks": attacks,
        "budget": {"epsilon": 8 / 255, "iterations": 2},
        "run": {"samples": samples, "seed": seed},
    })


@pytest.mark.slow
def test_full_grid_does_not_depend_on_thread_count(roster, small_data):
    plan = _every_attack(samples=50, seed=1)
    single = _bench(plan, roster, small_data, threads=1)
    many = _bench(plan, roster, small_data, threads=4)
    assert harness.matrix_csv(single) == harness.matrix_csv(many)


@pytest.mark.slow
def test_every_attack_keeps_the_budget_on_many_samples(roster):
    from taabench import dataset

    data = dataset.generate(seed=7, n_train=300, n_test=150)
    report = _bench(_every_attack(samples=100, seed=2), roster, data, threads=4)
    assert {row.attack for row in report.rows} == set(ATTACKS)
    for row in report.rows:
        assert len(row.records) == 100
        assert all(r.linf <= 8 / 255 + 1e-12 for r in row.records)
