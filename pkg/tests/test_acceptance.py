"""End-to-end runs of configs/desk.json. Deselected by default; run with ``pytest -m slow``."""
import json
from pathlib import Path

import numpy as np
import pytest

from attacks import load_adversarial
from evaluation import aggregate, non_decreasing_fraction, read_json_reports, trend_holds
from pipeline import run

DESK_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.json"
SEEDS = (0, 1, 2, 3, 4)

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cache = f"generation.cache_dir={json.dumps(str(root / 'cache'))}"
    first = run("pipeline", DESK_CONFIG, [cache, "run_id=seed-0"], seed=None, out=root / "runs")
    target = f"target.checkpoint={json.dumps(str(first.target_checkpoint))}"
    runs = {0: first}
    for seed in SEEDS[1:]:
        runs[seed] = run(
            "pipeline", DESK_CONFIG, [cache, target, f"run_id=seed-{seed}", "sweep_budgets=[]"],
            seed=seed, out=root / "runs",
        )
    return runs


def _results(run_, name):
    return read_json_reports(run_.path("results", name))


def test_target_and_extraction_quality(desk_runs):
    extraction = _results(desk_runs[0], "extraction.json")[0]
    assert extraction.target_test_accuracy >= 0.95
    assert extraction.agreement_rate >= 0.80
    assert extraction.ledger["used"] <= 400
    assert extraction.ledger["by_purpose"] == {"distillation-labels": 400}


def test_zero_query_agreement_beats_chance(desk_runs):
    sweep = _results(desk_runs[0], "sweep.json")
    zero = [r.agreement_rate for r in sweep if r.budget == 0]
    assert aggregate(zero)[0] >= 0.45


def test_agreement_grows_with_budget(desk_runs):
    sweep = _results(desk_runs[0], "sweep.json")
    series = []
    for seed in SEEDS:
        by_budget = sorted((r.budget, r.agreement_rate) for r in sweep if r.seed == seed)
        assert [b for b, _ in by_budget] == [0, 100, 200, 400]
        series.append([a for _, a in by_budget])
    assert non_decreasing_fraction(series) >= 0.9
    final = [r for r in sweep if r.budget == 400]
    zero = [r for r in sweep if r.budget == 0]
    assert aggregate(r.agreement_rate for r in final)[0] >= aggregate(r.agreement_rate for r in zero)[0]


def _asr(desk_runs, method):
    values = []
    for seed in SEEDS:
        reports = _results(desk_runs[seed], "asr.json")
        values.append(next(r.asr for r in reports if r.method == method and not r.targeted))
    return values


def test_iterative_attacks_transfer_at_least_as_well_as_fgsm(desk_runs):
    fgsm = _asr(desk_runs, "FGSM")
    assert trend_holds(_asr(desk_runs, "PGD"), fgsm)
    assert trend_holds(_asr(desk_runs, "BIM"), fgsm)


def test_pgd_beats_noise_baseline(desk_runs):
    pgd = np.mean(_asr(desk_runs, "PGD"))
    noise = np.mean(_asr(desk_runs, "NOISE"))
    assert pgd - noise >= 0.10


def test_adversarial_blobs_respect_budget(desk_runs):
    run_ = desk_runs[0]
    clean = run_.attack_set.images
    for path in sorted(run_.path("adversarial").glob("*.bin")):
        adversarial, sidecar = load_adversarial(path)
        epsilon = sidecar["spec"]["epsilon"]
        assert float((adversarial - clean).abs().max()) <= epsilon + 1e-6
        assert float(adversarial.min()) >= 0.0 and float(adversarial.max()) <= 1.0
