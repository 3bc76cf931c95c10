"""Extraction and transfer-attack metrics, budget sweeps and report files.

Evaluation-phase target queries go through a separate unlimited ledger
tagged "evaluation"; the distillation ledger is never touched here except
inside the sweep's own distillation cycles.
"""
import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

import settings
from attacks import attack_targets, uniform_noise
from blackbox_oracle import BlackBoxOracle, QueryLedger
from errors import BudgetExceededError, DegenerateReportError, InvalidInputError
from model_zoo import load, predict_labels
from substitute_training import DISTILL_SCHEDULE, collect_labels, distill, distill_soft, stratified_select

logger = logging.getLogger(__name__)


def evaluation_ledger():
    return QueryLedger(budget=None, name=settings.EVALUATION_PURPOSE)


def _labels_of(model_or_oracle, images, ledger):
    if isinstance(model_or_oracle, BlackBoxOracle):
        ledger = ledger if ledger is not None else evaluation_ledger()
        return model_or_oracle.query_hard(images, ledger, settings.EVALUATION_PURPOSE).as_tensor()
    return predict_labels(model_or_oracle, images)


def accuracy(model_or_oracle, labeled_set, ledger=None):
    if len(labeled_set) == 0:
        raise InvalidInputError("accuracy of an empty set is undefined")
    predicted = _labels_of(model_or_oracle, labeled_set.images, ledger)
    return (predicted == labeled_set.labels).float().mean().item()


def agreement(substitute, oracle, images, ledger=None):
    """Fraction of images on which substitute and target give the same top-1 label."""
    if len(images) == 0:
        raise InvalidInputError("agreement over an empty set is undefined")
    ours = _labels_of(substitute, images, None)
    theirs = _labels_of(oracle, images, ledger)
    return (ours == theirs).float().mean().item()


@dataclass
class ExtractionReport:
    dataset_id: str
    target_arch: str
    substitute_arch: str
    budget: int
    substitute_test_accuracy: float
    target_test_accuracy: float
    agreement_rate: float
    ledger: dict = field(default_factory=dict)
    evaluation_queries: int = 0
    seed: int = 0
    label_mode: str = "hard"

    def __post_init__(self):
        for name in ("substitute_test_accuracy", "target_test_accuracy", "agreement_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1]")
        if self.ledger.get("used", 0) > self.budget:
            raise InvalidInputError("ledger used exceeds the budget")


@dataclass
class AsrReport:
    method: str
    targeted: bool
    epsilon: float
    alpha: float
    steps: int
    n_eligible: int
    n_success: int
    asr: float
    seed: int = 0
    dataset_id: str = ""
    substitute_arch: str = ""
    target_arch: str = ""
    label_mode: str = "hard"

    def __post_init__(self):
        if self.n_eligible <= 0:
            raise DegenerateReportError("ASR needs at least one eligible example")
        if not 0.0 <= self.asr <= 1.0:
            raise InvalidInputError("asr must lie in [0, 1]")


def asr_counts(true_labels, clean_predictions, adv_predictions, targeted, targets=None):
    """Eligibility and success counts from stored labels.

    Untargeted: eligible where the clean prediction is correct, success where
    the adversarial prediction differs from the true label. Targeted:
    eligible where the true label is not the target, success where the
    adversarial prediction equals the target.
    """
    true_labels = np.asarray(true_labels)
    adv_predictions = np.asarray(adv_predictions)
    if targeted:
        targets = np.asarray(targets)
        eligible = true_labels != targets
        success = eligible & (adv_predictions == targets)
    else:
        eligible = np.asarray(clean_predictions) == true_labels
        success = eligible & (adv_predictions != true_labels)
    return int(eligible.sum()), int(success.sum())


def asr(target_oracle, clean_batch, true_labels, adv_batch, spec, ledger=None, **context):
    if clean_batch.shape != adv_batch.shape or len(clean_batch) != len(true_labels):
        raise InvalidInputError("clean batch, adversarial batch and labels are not aligned")
    ledger = ledger if ledger is not None else evaluation_ledger()
    true_labels = torch.as_tensor(true_labels, dtype=torch.long)
    adv_predictions = _labels_of(target_oracle, adv_batch, ledger)
    targets, clean_predictions = None, None
    if spec.targeted:
        targets = attack_targets(true_labels, spec, target_oracle.num_classes)
    else:
        clean_predictions = _labels_of(target_oracle, clean_batch, ledger)
    n_eligible, n_success = asr_counts(true_labels, clean_predictions, adv_predictions, spec.targeted, targets)
    if n_eligible == 0:
        raise DegenerateReportError(f"{spec.name}: no eligible examples")
    return AsrReport(
        spec.method, spec.targeted, spec.epsilon, spec.alpha, spec.steps,
        n_eligible, n_success, n_success / n_eligible, **context,
    )


def noise_baseline(target_oracle, clean_batch, true_labels, epsilon, seed=0, ledger=None, **context):
    """Untargeted success rate of uniform noise at the same L∞ budget."""
    ledger = ledger if ledger is not None else evaluation_ledger()
    noisy = uniform_noise(clean_batch, epsilon, seed)
    clean_predictions = _labels_of(target_oracle, clean_batch, ledger)
    noisy_predictions = _labels_of(target_oracle, noisy, ledger)
    n_eligible, n_success = asr_counts(true_labels, clean_predictions, noisy_predictions, False)
    if n_eligible == 0:
        raise DegenerateReportError("noise baseline: no eligible examples")
    return AsrReport("NOISE", False, epsilon, epsilon, 1, n_eligible, n_success, n_success / n_eligible, **context)


@dataclass
class SweepContext:
    """Everything a distill-evaluate cycle needs besides the budget."""
    pretrained: object
    pool: object
    oracle: BlackBoxOracle
    test_set: object
    target_test_accuracy: float
    dataset_id: str
    target_arch: str
    schedule: object = DISTILL_SCHEDULE
    seed: int = 0
    soft: bool = False


def _fresh_substitute(pretrained):
    if isinstance(pretrained, (str, Path)):
        return load(pretrained)
    return copy.deepcopy(pretrained)


def run_cycle(context, budget, ledger=None):
    """One distill-evaluate cycle from the pretrained substitute. Budget 0 skips querying."""
    ledger = ledger if ledger is not None else QueryLedger(budget, name="distillation")
    substitute = _fresh_substitute(context.pretrained)
    if budget > 0:
        selection = stratified_select(context.pool, budget, context.seed)
        pairs = collect_labels(context.oracle, selection, ledger, soft=context.soft)
        if context.soft:
            distill_soft(substitute, pairs.images, pairs.probabilities, context.schedule)
        else:
            distill(substitute, pairs, context.schedule)
    else:
        logger.info("Budget 0: zero-query evaluation of the pretrained substitute")
    if ledger.used > budget:
        raise BudgetExceededError(f"cycle used {ledger.used} queries with budget {budget}", ledger.dump())
    eval_ledger = evaluation_ledger()
    report = ExtractionReport(
        dataset_id=context.dataset_id,
        target_arch=context.target_arch,
        substitute_arch=substitute.spec.arch_id,
        budget=budget,
        substitute_test_accuracy=accuracy(substitute, context.test_set),
        target_test_accuracy=context.target_test_accuracy,
        agreement_rate=agreement(substitute, context.oracle, context.test_set.images, eval_ledger),
        ledger=ledger.snapshot(),
        evaluation_queries=eval_ledger.used,
        seed=context.seed,
        label_mode="soft" if context.soft else "hard",
    )
    return report, substitute


def budget_sweep(context, budgets):
    budgets = list(budgets)
    if not budgets:
        raise InvalidInputError("no budgets to sweep")
    if budgets != sorted(budgets) or budgets[0] < 0:
        raise InvalidInputError(f"budgets must be non-negative and ascending, got {budgets}")
    reports = []
    for i, budget in enumerate(budgets):
        logger.info("[%d/%d] Sweeping budget Q=%d", i + 1, len(budgets), budget)
        report, _ = run_cycle(context, budget)
        reports.append(report)
    return reports


def sign_test(wins, losses):
    """One-sided binomial p-value of at least ``wins`` successes out of ``wins + losses`` fair trials."""
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n


def trend_holds(higher, lower, alpha=0.05):
    """Paired sign test over seeds that ``higher`` beats ``lower``; ties are dropped."""
    wins = sum(1 for h, l in zip(higher, lower) if h > l)
    losses = sum(1 for h, l in zip(higher, lower) if h < l)
    return losses == 0 or sign_test(wins, losses) <= alpha


def non_decreasing_fraction(series):
    """Share of adjacent pairs, pooled over all series, that do not decrease."""
    pairs = [(a, b) for values in series for a, b in zip(values, values[1:])]
    if not pairs:
        return 1.0
    return sum(1 for a, b in pairs if b >= a) / len(pairs)


def aggregate(values):
    """Mean and population standard deviation across seeds."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        return float("nan"), float("nan")
    return float(values.mean()), float(values.std())


# ----- report files -----

EXTRACTION_COLUMNS = [f.name for f in fields(ExtractionReport)]
ASR_COLUMNS = [f.name for f in fields(AsrReport)]


def _row(report):
    row = asdict(report)
    if "ledger" in row:
        row["ledger"] = json.dumps(row["ledger"], sort_keys=True)
    return row


def _write_csv(path, columns, reports):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for report in reports:
            writer.writerow(_row(report))


def _parse(cls, row):
    values = {}
    for f in fields(cls):
        raw = row[f.name]
        if f.name == "ledger":
            values[f.name] = json.loads(raw)
        elif f.type in (int, "int"):
            values[f.name] = int(raw)
        elif f.type in (float, "float"):
            values[f.name] = float(raw)
        elif f.type in (bool, "bool"):
            values[f.name] = raw == "True"
        else:
            values[f.name] = raw
    return cls(**values)


def read_csv_reports(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return []
    cls = ExtractionReport if "agreement_rate" in rows[0] else AsrReport
    return [_parse(cls, row) for row in rows]


def write_results(path, kind, reports):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump({"schema_version": settings.SCHEMA_VERSION, "kind": kind,
                   "reports": [asdict(r) for r in reports]}, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_json_reports(path):
    with open(path) as f:
        data = json.load(f)
    if data.get("schema_version") != settings.SCHEMA_VERSION:
        raise InvalidInputError(f"unsupported report schema_version {data.get('schema_version')!r} in {path}")
    cls = ExtractionReport if data["kind"] == "extraction" else AsrReport
    return [cls(**record) for record in data["reports"]]


def _pct(values):
    mean, std = aggregate(values)
    if len(values) > 1:
        return f"{100 * mean:.2f} ± {100 * std:.2f}"
    return f"{100 * mean:.2f}"


def _grouped(reports, key):
    groups = {}
    for report in reports:
        groups.setdefault(key(report), []).append(report)
    return groups


def extraction_markdown(reports):
    """Table shaped like the usual extraction results: one row per (dataset, substitute)."""
    lines = [
        "| Dataset | Target model | Substitute | Target acc (%) | Substitute acc (%) | Agreement (%) | Query budget |",
        "|---|---|---|---|---|---|---|",
    ]
    groups = _grouped(reports, lambda r: (r.dataset_id, r.substitute_arch))
    for (dataset_id, substitute_arch), group in sorted(groups.items()):
        top = max(r.budget for r in group)
        final = [r for r in group if r.budget == top]
        lines.append(
            f"| {dataset_id} | {final[0].target_arch} | {substitute_arch} "
            f"| {_pct([r.target_test_accuracy for r in final])} "
            f"| {_pct([r.substitute_test_accuracy for r in final])} "
            f"| {_pct([r.agreement_rate for r in final])} | {top} |"
        )
    budgets = sorted({r.budget for r in reports})
    if len(budgets) > 1:
        lines += ["", "| Dataset | Substitute | " + " | ".join(f"Q={b}" for b in budgets) + " |",
                  "|---|---|" + "---|" * len(budgets)]
        for (dataset_id, substitute_arch), group in sorted(groups.items()):
            cells = []
            for b in budgets:
                at = [r.substitute_test_accuracy for r in group if r.budget == b]
                cells.append(_pct(at) if at else "-")
            lines.append(f"| {dataset_id} | {substitute_arch} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def asr_markdown(reports):
    lines = ["| Dataset | Substitute | Method | Untargeted ASR (%) | Targeted ASR (%) |", "|---|---|---|---|---|"]
    groups = _grouped(reports, lambda r: (r.dataset_id, r.substitute_arch, r.method))
    for (dataset_id, substitute_arch, method), group in sorted(groups.items()):
        untargeted = [r.asr for r in group if not r.targeted]
        targeted = [r.asr for r in group if r.targeted]
        lines.append(
            f"| {dataset_id} | {substitute_arch} | {method} "
            f"| {_pct(untargeted) if untargeted else '-'} | {_pct(targeted) if targeted else '-'} |"
        )
    return "\n".join(lines) + "\n"


def _plot_budget_curve(reports, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for (dataset_id, substitute_arch), group in sorted(_grouped(reports, lambda r: (r.dataset_id, r.substitute_arch)).items()):
        budgets = sorted({r.budget for r in group})
        means = [aggregate(r.substitute_test_accuracy for r in group if r.budget == b)[0] for b in budgets]
        agree = [aggregate(r.agreement_rate for r in group if r.budget == b)[0] for b in budgets]
        ax.plot(budgets, means, marker="o", label=f"{dataset_id}/{substitute_arch} accuracy")
        ax.plot(budgets, agree, marker="s", linestyle="--", label=f"{dataset_id}/{substitute_arch} agreement")
    ax.set_xlabel("query budget Q")
    ax.set_ylabel("rate")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def emit_report(reports, out_dir, formats=("csv", "json", "md", "png"), name=None):
    """Write CSV, JSON and Markdown tables (and an accuracy-vs-Q plot) for a list of reports."""
    out_dir = Path(out_dir)
    reports = list(reports)
    written = []
    for kind, cls in (("extraction", ExtractionReport), ("asr", AsrReport)):
        group = [r for r in reports if isinstance(r, cls)]
        if not group:
            continue
        stem = f"{name}-{kind}" if name else kind
        report_dir = out_dir / "reports"
        report_dir.mkdir(parents=True, exist_ok=True)
        if "csv" in formats:
            path = report_dir / f"{stem}.csv"
            _write_csv(path, EXTRACTION_COLUMNS if kind == "extraction" else ASR_COLUMNS, group)
            written.append(path)
        if "json" in formats:
            written.append(write_results(report_dir / f"{stem}.json", kind, group))
        if "md" in formats:
            path = report_dir / f"{stem}.md"
            path.write_text(extraction_markdown(group) if kind == "extraction" else asr_markdown(group))
            written.append(path)
        if "png" in formats and kind == "extraction" and len({r.budget for r in group}) > 1:
            path = out_dir / "plots" / f"{stem}-accuracy-vs-budget.png"
            _plot_budget_curve(group, path)
            written.append(path)
    return written
