"""Cached, manifest-backed execution of each experiment phase."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ssl_cr.configuration import ExperimentConfig, PretrainMethod, TaskMode
from ssl_cr.consistency import consistency_train
from ssl_cr.errors import ConfigurationError, UndefinedMetricError
from ssl_cr.finetune import finetune, load_task_model, predict_examples, random_checkpoint
from ssl_cr.metrics import (
    SLIDE_FEATURES_VERSION,
    MetricReport,
    auc_delong,
    build_heatmap,
    classification_report,
    export_heatmap,
    predict_slide,
    regression_report,
    slide_features,
    train_slide_classifier,
)
from ssl_cr.pyramid_data import Example, SyntheticCorpus, build_corpus
from ssl_cr.seeding import seed_all
from ssl_cr.ssl_baselines import moco_pretrain, vae_pretrain
from ssl_cr.ssl_pretrain import pretrain
from ssl_cr.storage.checkpoint_store import Checkpoint, file_sha256, load_checkpoint, save_checkpoint
from ssl_cr.storage.manifest_store import ManifestStore, RunManifest, make_run_id
from ssl_cr.storage.pyramid_store import read_corpus, write_corpus
from ssl_cr.utils import MetricsLog

logger = logging.getLogger(__name__)

# Config sections each phase depends on; other keys do not change its output.
PHASE_SECTIONS = {
    "gen-data": ("data.",),
    "pretrain": ("data.", "augment.", "pretrain.", "moco.", "vae."),
    "finetune": ("data.", "augment.", "finetune."),
    "consist": ("data.", "augment.", "finetune.alpha", "consistency."),
    "eval": ("data.", "evaluation."),
}
_corpora: dict[str, SyntheticCorpus] = {}


@dataclass
class PhaseResult:
    manifest: RunManifest
    cached: bool


def phase_config(config: ExperimentConfig, kind: str) -> dict:
    """The dotted keys that determine a phase's output."""
    prefixes = PHASE_SECTIONS[kind]
    flat = config.flat()
    selected = {k: v for k, v in flat.items() if k.startswith(prefixes)}
    if kind == "pretrain":
        method = flat["pretrain.method"]
        selected = {
            k: v for k, v in selected.items()
            if not (k.startswith("moco.") and method != "moco") and not (k.startswith("vae.") and method != "vae")
        }
    return selected


def _fresh_metrics(store: ManifestStore, run_id: str) -> MetricsLog:
    path = store.run_dir(run_id) / "metrics.jsonl"
    path.unlink(missing_ok=True)
    return MetricsLog(run_id=run_id, path=path)


def _store_checkpoint(store: ManifestStore, manifest: RunManifest, ckpt: Checkpoint) -> RunManifest:
    ckpt.manifest_id = manifest.run_id
    path = store.run_dir(manifest.run_id) / "checkpoint.pt"
    manifest.output_path = str(path)
    manifest.output_sha256 = save_checkpoint(ckpt, path)
    manifest.rng_streams = dict(ckpt.rng_streams)
    if ckpt.best_epoch is not None and ckpt.history:
        best = ckpt.history[ckpt.best_epoch]
        manifest.metrics = {"best_epoch": ckpt.best_epoch,
                            **{k: v for k, v in best.items() if isinstance(v, float) and math.isfinite(v)}}
    store.write(manifest)
    return manifest


def load_run_checkpoint(manifest: RunManifest) -> Checkpoint:
    """Load a run's checkpoint, verifying the hash its manifest recorded."""
    if manifest.output_path is None:
        raise ConfigurationError(f"Run {manifest.run_id} has no checkpoint")
    return load_checkpoint(Path(manifest.output_path), expected_sha256=manifest.output_sha256)


def corpus_for(manifest: RunManifest) -> SyntheticCorpus:
    if manifest.run_id not in _corpora:
        _corpora[manifest.run_id] = read_corpus(Path(manifest.output_path).parent)
    return _corpora[manifest.run_id]


###################
# Phases
###################
def run_gen_data(config: ExperimentConfig, store: ManifestStore) -> PhaseResult:
    """Generate (or reuse) the synthetic corpus for the config's data section and seed."""
    selected = phase_config(config, "gen-data")
    run_id = make_run_id("gen-data", selected, config.seed)
    cached = store.completed(run_id)
    if cached is not None:
        logger.info("[harness] gen-data %s cached", run_id)
        return PhaseResult(cached, True)
    seed_all(config.seed)
    corpus = build_corpus(config.data, config.seed)
    path = write_corpus(corpus, store.run_dir(run_id))
    manifest = RunManifest(
        run_id=run_id, kind="gen-data", config=selected, seed=config.seed,
        output_path=str(path), output_sha256=file_sha256(path),
        metrics={"pool": len(corpus.pool), "validation": len(corpus.validation), "test": len(corpus.test)},
    )
    store.write(manifest)
    _corpora[run_id] = corpus
    return PhaseResult(manifest, False)


def run_pretrain(config: ExperimentConfig, store: ManifestStore, data: RunManifest) -> PhaseResult:
    """Pretrain with `pretrain.method` on the corpus of `data`."""
    selected = phase_config(config, "pretrain")
    inputs = {"dataset": data.output_sha256}
    run_id = make_run_id("pretrain", selected, config.seed, inputs)
    cached = store.completed(run_id)
    if cached is not None:
        logger.info("[harness] pretrain %s cached", run_id)
        return PhaseResult(cached, True)

    corpus = corpus_for(data)
    streams = seed_all(config.seed)
    metrics = _fresh_metrics(store, run_id)
    method = config.pretrain.method
    sampling = streams.numpy("sampling")
    if method is PretrainMethod.RSP:
        train = corpus.sample_tuples(config.data.n_pretrain_tuples, sampling)
        val = corpus.sample_tuples(config.data.n_pretrain_val_tuples, sampling)
        ckpt = pretrain(config, train, val, streams, metrics)
    elif method is PretrainMethod.MOCO:
        ckpt = moco_pretrain(config, corpus.sample_patches(config.data.n_pretrain_tuples, sampling), streams, metrics)
    elif method is PretrainMethod.VAE:
        ckpt = vae_pretrain(config, corpus.sample_patches(config.data.n_pretrain_tuples, sampling), streams, metrics)
    else:
        ckpt = random_checkpoint(config.pretrain.arch, streams.seed_for("init"))
        ckpt.rng_streams = streams.describe()

    manifest = RunManifest(
        run_id=run_id, kind="pretrain", config=selected, seed=config.seed, inputs=inputs, parents=[data.run_id]
    )
    return PhaseResult(_store_checkpoint(store, manifest, ckpt), False)


def run_finetune(
    config: ExperimentConfig, store: ManifestStore, data: RunManifest, pretrained: RunManifest
) -> PhaseResult:
    """Fine-tune a pretraining run at `finetune.alpha`.

    The pretraining run may come from another profile; its run id is recorded
    as a parent either way.
    """
    selected = phase_config(config, "finetune")
    inputs = {"dataset": data.output_sha256, "checkpoint": pretrained.output_sha256}
    run_id = make_run_id("finetune", selected, config.seed, inputs)
    cached = store.completed(run_id)
    if cached is not None:
        logger.info("[harness] finetune %s cached", run_id)
        return PhaseResult(cached, True)

    ckpt = load_run_checkpoint(pretrained)
    corpus = corpus_for(data)
    streams = seed_all(config.seed)
    result = finetune(ckpt, corpus.split(config.finetune.alpha), config, streams, _fresh_metrics(store, run_id))
    manifest = RunManifest(
        run_id=run_id, kind="finetune", config=selected, seed=config.seed, inputs=inputs,
        parents=[data.run_id, pretrained.run_id],
    )
    return PhaseResult(_store_checkpoint(store, manifest, result), False)


def resolve_finetune_init(config: ExperimentConfig, store: ManifestStore, ref: str) -> RunManifest:
    """Finetune manifest for a checkpoint path or a run id.

    A checkpoint written by this store maps back to its run; any other
    checkpoint with a task head is registered as an imported finetune run.
    """
    path = Path(ref)
    if not path.is_file():
        manifest = store.read(ref)
        if manifest is None:
            raise ConfigurationError(f"'{ref}' is neither a checkpoint file nor a known run id")
        return manifest

    sha = file_sha256(path)
    ckpt = load_checkpoint(path, expected_sha256=sha)
    if ckpt.manifest_id is not None:
        known = store.read(ckpt.manifest_id)
        if known is not None and known.output_sha256 == sha:
            return known
    if not ckpt.has_task_head:
        raise ConfigurationError(f"Checkpoint {path} has no task head to start consistency training from")
    selected = {"finetune.alpha": config.finetune.alpha}
    inputs = {"checkpoint": sha}
    manifest = RunManifest(
        run_id=make_run_id("finetune", selected, config.seed, inputs), kind="finetune", config=selected,
        seed=config.seed, inputs=inputs, output_path=str(path.resolve()), output_sha256=sha,
        metrics={"imported": True},
    )
    store.write(manifest)
    logger.info("[harness] registered %s as %s", path, manifest.run_id)
    return manifest


def run_consist(config: ExperimentConfig, store: ManifestStore, data: RunManifest, tuned: RunManifest) -> PhaseResult:
    """Consistency training initialized from a fine-tuning run."""
    if tuned.kind != "finetune":
        raise ConfigurationError(f"Consistency training starts from a finetune run, got {tuned.kind}")
    if abs(float(tuned.config.get("finetune.alpha", -1)) - config.finetune.alpha) > 1e-9:
        raise ConfigurationError("Fine-tuned run and consistency config disagree on alpha")
    selected = phase_config(config, "consist")
    inputs = {"dataset": data.output_sha256, "checkpoint": tuned.output_sha256}
    run_id = make_run_id("consist", selected, config.seed, inputs)
    cached = store.completed(run_id)
    if cached is not None:
        logger.info("[harness] consist %s cached", run_id)
        return PhaseResult(cached, True)

    ckpt = load_run_checkpoint(tuned)
    corpus = corpus_for(data)
    streams = seed_all(config.seed)
    result = consistency_train(ckpt, corpus.split(config.finetune.alpha), config, streams, _fresh_metrics(store, run_id))
    manifest = RunManifest(
        run_id=run_id, kind="consist", config=selected, seed=config.seed, inputs=inputs,
        parents=[data.run_id, tuned.run_id],
    )
    return PhaseResult(_store_checkpoint(store, manifest, result), False)


###################
# Evaluation
###################
def _slide_heatmap(corpus: SyntheticCorpus, probs: np.ndarray, examples: list[Example], slide: int):
    region = corpus.label_maps[slide].region_size
    rows = [i for i, ex in enumerate(examples) if ex.slide_index == slide]
    return build_heatmap(
        [float(probs[i, 1]) for i in rows],
        [examples[i].center for i in rows],
        stride=region,
        origin=(region // 2, region // 2),
        shape=corpus.label_maps[slide].grid_shape,
    )


def slide_level_metrics(
    corpus: SyntheticCorpus, model, config: ExperimentConfig, report: MetricReport, heatmap_dir: Optional[Path]
) -> None:
    """Train the slide classifier on training-slide heatmaps and score the test slides."""
    train_examples = corpus.pool + corpus.validation
    train_probs = predict_examples(model, train_examples)
    test_probs = predict_examples(model, corpus.test)

    def features(slides, probs, examples):
        rows, labels = [], []
        for slide in slides:
            heatmap = _slide_heatmap(corpus, probs, examples, slide)
            rows.append(slide_features(heatmap))
            labels.append(corpus.label_maps[slide].slide_label)
            if heatmap_dir is not None and config.evaluation.export_heatmaps and examples is corpus.test:
                export_heatmap(heatmap, heatmap_dir / f"slide_{slide:03d}.png", title=f"slide {slide}")
        return np.stack(rows), np.asarray(labels)

    x_train, y_train = features(corpus.train_slides, train_probs, train_examples)
    x_test, y_test = features(corpus.test_slides, test_probs, corpus.test)
    report.slide_features_version = SLIDE_FEATURES_VERSION
    try:
        classifier = train_slide_classifier(x_train, y_train, config.evaluation.svm_c)
        slide_probs = predict_slide(classifier, x_test)
        result = auc_delong(slide_probs, y_test, config.evaluation.confidence)
        report.metrics["slide_auc"] = result.auc
        report.intervals["slide_auc"] = (result.low, result.high)
    except UndefinedMetricError as e:
        report.flags.append(f"slide_auc_undefined: {e}")


def run_eval(config: ExperimentConfig, store: ManifestStore, data: RunManifest, trained: RunManifest) -> MetricReport:
    """Score a fine-tuned or consistency run on the held-out test slides."""
    corpus = corpus_for(data)
    if not corpus.test:
        raise ConfigurationError("The corpus has no test examples")
    model = load_task_model(load_run_checkpoint(trained))
    preds = predict_examples(model, corpus.test)
    out_dir = store.run_dir(trained.run_id)

    if config.data.task is TaskMode.REGRESSION:
        truth = np.asarray([float(ex.target) for ex in corpus.test])
        raters = np.asarray([ex.raters for ex in corpus.test]) if all(ex.raters for ex in corpus.test) else None
        report = regression_report(trained.run_id, preds, truth, raters, config.evaluation.confidence)
    else:
        labels = np.asarray([int(ex.target) for ex in corpus.test])
        report = classification_report(trained.run_id, preds, labels, config.evaluation.confidence)
        if config.data.slide_labels:
            slide_level_metrics(corpus, model, config, report, out_dir / "heatmaps")
    report.write(out_dir / "report.json")
    trained.metrics = {**trained.metrics, **{f"test_{k}": v for k, v in report.metrics.items()}}
    store.write(trained)
    logger.info("[harness] eval %s %s", trained.run_id, report.metrics)
    return report
