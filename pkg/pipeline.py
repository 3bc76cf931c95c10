"""Stage runner: generation through reporting inside one run directory.

    runs/<run_id>/
        config.json            resolved config
        manifest.json          synthetic pool
        models/                target, pretrained and distilled checkpoints
        histories/             per-epoch training CSVs
        queried.json           selected pool indices and the labels bought for them
        ledger.json            distillation ledger with its timestamped log
        adversarial/           one blob + sidecar per attack
        results/               stored report records (report re-renders from these)
        reports/ plots/        rendered tables and figures
        .done-<stage>          completion markers for --resume
"""
import json
import logging
import shutil
from dataclasses import replace
from functools import cached_property
from pathlib import Path

import numpy as np

import settings
from attacks import AttackSpec, batch_attack, load_adversarial, save_adversarial
from blackbox_oracle import LocalOracle, QueryLedger, RemoteOracle
from config import load_config, save_config
from datasets import desk_splits, load_torchvision
from errors import BudgetExceededError, ConfigError, DegenerateReportError
from evaluation import (
    ExtractionReport, SweepContext, accuracy, agreement, asr, budget_sweep, emit_report, evaluation_ledger,
    noise_baseline, read_json_reports, write_results,
)
from mlaas_server import ServerConfig, serve
from model_zoo import ClassifierSpec, build, load, read_header, save
from substitute_training import collect_labels, distill, distill_soft, pretrain, stratified_select, train_target
from synthgen import (
    ClassVocabulary, ImageCache, RequestDefaults, SyntheticManifest, generate_pool, load_pool, make_backend,
)

logger = logging.getLogger(__name__)

PIPELINE_STAGES = ("gen", "train-target", "pretrain", "distill", "attack", "eval", "sweep", "report")
COMMANDS = PIPELINE_STAGES + ("serve", "pipeline")
ZERO_QUERY_MARKER = ".zero-query"


class Run:
    def __init__(self, config, resume=False):
        self.config = config
        self.dir = Path(config.run_dir)
        self.resume = resume
        self.ledger = QueryLedger(config.budget, name="distillation")

    def path(self, *parts):
        return self.dir.joinpath(*parts)

    @property
    def manifest_path(self):
        return self.path("manifest.json")

    @property
    def target_checkpoint(self):
        if self.config.target.checkpoint:
            return Path(self.config.target.checkpoint)
        return self.path("models", "target.ckpt")

    @property
    def pretrained_checkpoint(self):
        return self.path("models", "substitute-pretrained.ckpt")

    @property
    def substitute_checkpoint(self):
        return self.path("models", "substitute.ckpt")

    @property
    def dataset_id(self):
        return self.config.dataset.preset or self.config.dataset.kind

    @property
    def soft(self):
        return self.config.target.label_mode == "soft"

    def marker(self, stage):
        return self.path(f".done-{stage}")

    def is_done(self, stage):
        return self.marker(stage).exists()

    def mark_done(self, stage):
        self.dir.mkdir(parents=True, exist_ok=True)
        self.marker(stage).write_text("")

    def require(self, path, stage):
        if not Path(path).exists():
            raise ConfigError(f"{path} does not exist; run the '{stage}' stage first")
        return path

    @cached_property
    def harness(self):
        """(train, test) labelled data the target is trained and everything is scored on."""
        dataset = self.config.dataset
        if dataset.kind == "desk":
            return desk_splits(
                dataset.num_classes, dataset.train_per_class, dataset.test_per_class, tuple(dataset.shape), dataset.seed
            )
        if dataset.kind in ("cifar10", "cifar100"):
            return load_torchvision(dataset.kind, dataset.root, True), load_torchvision(dataset.kind, dataset.root, False)
        if not dataset.train_manifest or not dataset.test_manifest:
            raise ConfigError("dataset kind 'manifest' needs dataset.train_manifest and dataset.test_manifest")
        train = load_pool(SyntheticManifest.load(dataset.train_manifest))
        test = load_pool(SyntheticManifest.load(dataset.test_manifest))
        return replace(train, name=f"{self.dataset_id}-train"), replace(test, name=f"{self.dataset_id}-test")

    @property
    def test_set(self):
        return self.harness[1]

    @cached_property
    def pool(self):
        return load_pool(SyntheticManifest.load(self.require(self.manifest_path, "gen")))

    @cached_property
    def attack_set(self):
        """Fixed subset of the test split that every attack and seed is scored on."""
        test = self.test_set
        n = min(self.config.attack_examples, len(test))
        rng = np.random.default_rng(self.config.dataset.seed)
        return test.subset(sorted(rng.permutation(len(test))[:n].tolist()))

    @cached_property
    def oracle(self):
        dataset, target = self.config.dataset, self.config.target
        shape = tuple(dataset.shape)
        if target.server_url:
            return RemoteOracle(target.server_url, shape, dataset.num_classes, api_key=target.api_key)
        return LocalOracle(load(self.require(self.target_checkpoint, "train-target")))

    @property
    def target_arch(self):
        if self.config.target.server_url:
            return self.config.target.arch
        header, _ = read_header(self.require(self.target_checkpoint, "train-target"))
        return header["spec"]["arch_id"]

    def new_classifier(self, arch):
        dataset = self.config.dataset
        return build(ClassifierSpec(arch, dataset.num_classes, tuple(dataset.shape), seed=self.config.seed))

    def write_json(self, name, data):
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")
        return path


def stage_gen(run):
    generation, dataset = run.config.generation, run.config.dataset
    if generation.manifest:
        logger.info("Using prepared pool %s", generation.manifest)
        manifest = SyntheticManifest.load(generation.manifest)
    else:
        defaults = RequestDefaults(
            inference_steps=generation.inference_steps,
            native_resolution=generation.native_resolution,
            base_seed=generation.base_seed,
            channels=dataset.shape[0],
        )
        manifest = generate_pool(
            ClassVocabulary(tuple(dataset.class_names)),
            generation.per_class_count,
            defaults,
            make_backend(generation.service_id),
            ImageCache(generation.cache_dir or settings.CACHE_DIR),
            tuple(dataset.shape),
            generation.workers,
        )
    if manifest.num_classes != dataset.num_classes:
        raise ConfigError(f"pool has {manifest.num_classes} classes, dataset has {dataset.num_classes}")
    manifest.save(run.manifest_path)
    logger.info("Pool of %d images written to %s", len(manifest), run.manifest_path)


def stage_train_target(run):
    target = run.config.target
    if target.server_url:
        logger.info("Target is served at %s; nothing to train", target.server_url)
        return
    if target.checkpoint:
        run.require(target.checkpoint, "train-target")
        logger.info("Using prepared target checkpoint %s", target.checkpoint)
        return
    train, test = run.harness
    dataset = run.config.dataset
    model = build(ClassifierSpec(target.arch, dataset.num_classes, tuple(dataset.shape), seed=dataset.seed))
    model, history = train_target(model, train, replace(target.schedule, seed=dataset.seed), test, progress=True)
    history.write_csv(run.path("histories", "target.csv"))
    save(model, run.target_checkpoint)


def stage_serve(run):
    server = run.config.server
    config = ServerConfig(
        checkpoint=str(run.require(run.target_checkpoint, "train-target")),
        host=server.host,
        port=server.port,
        mode=run.config.target.label_mode,
        client_budget=server.client_budget,
        api_keys=tuple(server.api_keys),
    )
    serve(config, engine=server.engine)


def stage_pretrain(run):
    substitute = run.new_classifier(run.config.substitute.arch)
    schedule = replace(run.config.substitute.pretrain, seed=run.config.seed)
    substitute, history = pretrain(substitute, run.pool, schedule, progress=True)
    history.write_csv(run.path("histories", "pretrain.csv"))
    save(substitute, run.pretrained_checkpoint)


def stage_distill(run):
    budget = run.config.budget
    run.require(run.pretrained_checkpoint, "pretrain")
    if budget == 0:
        logger.info("Budget Q=0: distillation skipped, substitute stays pretrained")
        run.write_json(ZERO_QUERY_MARKER, {"budget": 0})
        shutil.copyfile(run.pretrained_checkpoint, run.substitute_checkpoint)
        run.write_json("ledger.json", run.ledger.dump())
        return
    run.path(ZERO_QUERY_MARKER).unlink(missing_ok=True)
    selection = stratified_select(run.pool, budget, run.config.seed)
    pairs = collect_labels(run.oracle, selection, run.ledger, soft=run.soft)
    queried = {"indices": pairs.indices, "labels": pairs.labels.tolist(), "class_counts": selection.class_counts}
    if run.soft:
        queried["probabilities"] = pairs.probabilities.tolist()
    run.write_json("queried.json", queried)

    substitute = load(run.pretrained_checkpoint)
    schedule = replace(run.config.substitute.distill, seed=run.config.seed)
    if run.soft:
        substitute, history = distill_soft(substitute, pairs.images, pairs.probabilities, schedule, progress=True)
    else:
        substitute, history = distill(substitute, pairs, schedule, progress=True)
    if run.ledger.used > budget:
        raise BudgetExceededError(f"distillation used {run.ledger.used} queries of {budget}", run.ledger.dump())
    history.write_csv(run.path("histories", "distill.csv"))
    save(substitute, run.substitute_checkpoint, {"budget": budget, "queries_used": run.ledger.used})
    run.write_json("ledger.json", run.ledger.dump())


def stage_attack(run):
    attacks = run.config.attacks
    if not attacks:
        logger.info("No attacks configured")
        return
    substitute = load(run.require(run.substitute_checkpoint, "distill"))
    images, labels = run.attack_set.images, run.attack_set.labels
    for i, spec in enumerate(attacks):
        spec = replace(spec, seed=run.config.seed)
        logger.info("[%d/%d] Attacking: %s", i + 1, len(attacks), spec.name)
        adversarial, _ = batch_attack(substitute, images, labels, spec)
        save_adversarial(run.path("adversarial", f"{spec.name}.bin"), adversarial, spec, run.dataset_id, run.config.seed)


def _stored_ledger(run):
    path = run.require(run.path("ledger.json"), "distill")
    with open(path) as f:
        data = json.load(f)
    data.pop("log", None)
    return data


def stage_eval(run):
    substitute = load(run.require(run.substitute_checkpoint, "distill"))
    oracle, test = run.oracle, run.test_set
    eval_ledger = evaluation_ledger()
    context = {
        "seed": run.config.seed,
        "dataset_id": run.dataset_id,
        "substitute_arch": substitute.spec.arch_id,
        "target_arch": run.target_arch,
        "label_mode": run.config.target.label_mode,
    }
    extraction = ExtractionReport(
        dataset_id=run.dataset_id,
        target_arch=context["target_arch"],
        substitute_arch=context["substitute_arch"],
        budget=run.config.budget,
        substitute_test_accuracy=accuracy(substitute, test),
        target_test_accuracy=accuracy(oracle, test, eval_ledger),
        agreement_rate=agreement(substitute, oracle, test.images, eval_ledger),
        ledger=_stored_ledger(run),
        seed=run.config.seed,
        label_mode=context["label_mode"],
    )
    logger.info(
        "Substitute accuracy %.4f, target %.4f, agreement %.4f",
        extraction.substitute_test_accuracy, extraction.target_test_accuracy, extraction.agreement_rate,
    )

    clean = run.attack_set
    reports = []
    for spec in run.config.attacks:
        path = run.require(run.path("adversarial", f"{spec.name}.bin"), "attack")
        adversarial, sidecar = load_adversarial(path)
        stored = AttackSpec(**sidecar["spec"])
        try:
            report = asr(oracle, clean.images, clean.labels, adversarial, stored, eval_ledger, **context)
        except DegenerateReportError as e:
            logger.warning("Skipping %s: %s", stored.name, e)
            continue
        logger.info("%s ASR %.4f (%d/%d)", stored.name, report.asr, report.n_success, report.n_eligible)
        reports.append(report)
    for epsilon in sorted({spec.epsilon for spec in run.config.attacks}):
        try:
            reports.append(noise_baseline(oracle, clean.images, clean.labels, epsilon, ledger=eval_ledger, **context))
        except DegenerateReportError as e:
            logger.warning("Skipping noise baseline: %s", e)

    extraction.evaluation_queries = eval_ledger.used
    write_results(run.path("results", "extraction.json"), "extraction", [extraction])
    write_results(run.path("results", "asr.json"), "asr", reports)


def stage_sweep(run):
    budgets = run.config.sweep_budgets
    if not budgets:
        logger.info("No sweep budgets configured")
        return
    pretrained = run.require(run.pretrained_checkpoint, "pretrain")
    target_test_accuracy = accuracy(run.oracle, run.test_set, evaluation_ledger())
    reports = []
    for i, seed in enumerate(run.config.seeds):
        logger.info("[%d/%d] Sweep seed: %d", i + 1, len(run.config.seeds), seed)
        context = SweepContext(
            pretrained=pretrained,
            pool=run.pool,
            oracle=run.oracle,
            test_set=run.test_set,
            target_test_accuracy=target_test_accuracy,
            dataset_id=run.dataset_id,
            target_arch=run.target_arch,
            schedule=replace(run.config.substitute.distill, seed=seed),
            seed=seed,
            soft=run.soft,
        )
        reports.extend(budget_sweep(context, budgets))
    write_results(run.path("results", "sweep.json"), "extraction", reports)


def stage_report(run):
    """Render tables and plots from stored result records only."""
    results = run.path("results")
    main = []
    for name in ("extraction.json", "asr.json"):
        if (results / name).exists():
            main.extend(read_json_reports(results / name))
    written = emit_report(main, run.dir) if main else []
    if (results / "sweep.json").exists():
        written += emit_report(read_json_reports(results / "sweep.json"), run.dir, name="sweep")
    if not written:
        raise ConfigError(f"no stored results under {results}; run 'eval' or 'sweep' first")
    for path in written:
        logger.info("Wrote %s", path)


STAGE_FUNCTIONS = {
    "gen": stage_gen,
    "train-target": stage_train_target,
    "serve": stage_serve,
    "pretrain": stage_pretrain,
    "distill": stage_distill,
    "attack": stage_attack,
    "eval": stage_eval,
    "sweep": stage_sweep,
    "report": stage_report,
}


def run_stages(config, stages, resume=False):
    run = Run(config, resume)
    save_config(config, run.path("config.json"))
    for i, stage in enumerate(stages):
        if resume and run.is_done(stage):
            logger.info("[%d/%d] Skipping %s (done)", i + 1, len(stages), stage)
            continue
        logger.info("[%d/%d] Stage: %s", i + 1, len(stages), stage)
        STAGE_FUNCTIONS[stage](run)
        if stage != "serve":
            run.mark_done(stage)
    return run


def run(command, config_path, overrides=(), resume=False, seed=None, out=None):
    """Resolve the config for ``command`` and execute its stages."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command '{command}'")
    overrides = list(overrides)
    if seed is not None:
        overrides.append(f"seeds=[{int(seed)}]")
    if out is not None:
        overrides.append(f"output_dir={json.dumps(str(out))}")
    config = load_config(config_path, overrides)
    stages = PIPELINE_STAGES if command == "pipeline" else (command,)
    return run_stages(config, stages, resume)
