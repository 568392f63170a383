import numpy as np
import pandas as pd
import pytest

from ssl_cr.configuration import config_diff, resolve_config
from ssl_cr.errors import ConfigurationError
from ssl_cr.finetune import finetune, random_checkpoint
from ssl_cr.harness.cli import build_parser, collect_overrides, main
from ssl_cr.harness.matrix import ExperimentMatrix, plan_ablation, primary_metric, report_table, run_matrix
from ssl_cr.harness.pipeline import run_cell
from ssl_cr.harness.plotting import load_metrics, plot_learning_curves
from ssl_cr.harness.runs import (
    phase_config,
    resolve_finetune_init,
    run_consist,
    run_eval,
    run_finetune,
    run_gen_data,
    run_pretrain,
)
from ssl_cr.pyramid_data import build_corpus
from ssl_cr.seeding import STREAM_NAMES, seed_all
from ssl_cr.ssl_pretrain import pretrain
from ssl_cr.storage.checkpoint_store import file_sha256, save_checkpoint
from ssl_cr.storage.manifest_store import ManifestStore
from ssl_cr.utils import MetricsLog


###################
# Matrix and ablations
###################
@pytest.mark.parametrize("axis, key", [("mu", "consistency.mu"), ("n_aug", "augment.strong_n_aug")])
def test_ablation_plans_differ_in_one_key(config, axis, key):
    plans = plan_ablation(axis, config)
    assert [value for value, _ in plans] == list(range(1, 8))
    for value, planned in plans:
        diff = config_diff(config, planned)
        assert set(diff) <= {key}
        assert planned.flat()[key] == value


def test_ablation_rejects_other_alphas_and_values(make_config, config):
    with pytest.raises(ConfigurationError):
        plan_ablation("mu", make_config(finetune__alpha=0.25))
    with pytest.raises(ConfigurationError):
        plan_ablation("mu", config, values=[0, 3])
    with pytest.raises(ConfigurationError):
        plan_ablation("lambda", config)


def test_matrix_cells():
    matrix = ExperimentMatrix(methods=["rsp", "random"], phases=["ft", "cr"], alphas=[0.10], seeds=[0, 1])
    cells = list(matrix.cells())
    assert len(cells) == 8
    assert ("rsp", "cr", 0.10, 1) in cells


def test_empty_matrix_returns_an_empty_frame(config, tmp_path):
    results = run_matrix(ExperimentMatrix(methods=[]), config, tmp_path, out_dir=tmp_path / "reports")
    assert results.empty
    assert not (tmp_path / "reports").exists()


def test_report_table_takes_the_median_over_seeds():
    results = pd.DataFrame(
        [
            {"method": "rsp", "phase": "ft", "alpha": 0.1, "seed": 0, "icc_truth": 0.5},
            {"method": "rsp", "phase": "ft", "alpha": 0.1, "seed": 1, "icc_truth": 0.7},
            {"method": "rsp", "phase": "ft", "alpha": 0.1, "seed": 2, "icc_truth": 0.9},
            {"method": "rsp", "phase": "cr", "alpha": 0.1, "seed": 0, "icc_truth": 0.8},
        ]
    )
    table = report_table(results, "icc_truth")
    assert table.loc["rsp", 0.1] == pytest.approx(0.7)
    assert table.loc["rsp+CR", 0.1] == pytest.approx(0.8)
    assert report_table(results, "slide_auc").empty


def test_primary_metric(config, make_config):
    assert primary_metric(config) == "icc_truth"
    assert primary_metric(make_config(data__task="classification")) == "accuracy"
    assert primary_metric(make_config(data__task="classification", data__slide_labels=True)) == "slide_auc"


def test_phase_config_keeps_only_relevant_keys(config):
    pretrain_keys = phase_config(config, "pretrain")
    assert not any(k.startswith(("moco.", "vae.")) for k in pretrain_keys)
    consist_keys = phase_config(config, "consist")
    assert "finetune.alpha" in consist_keys
    assert "finetune.lr" not in consist_keys
    assert "consistency.mu" in consist_keys


###################
# Phases
###################
def test_phases_run_once_and_are_cached(tmp_path, make_config):
    config = make_config(pretrain__method="random")
    store = ManifestStore(tmp_path)
    data = run_gen_data(config, store)
    assert not data.cached
    assert run_gen_data(config, store).cached

    pretrained = run_pretrain(config, store, data.manifest)
    tuned = run_finetune(config, store, data.manifest, pretrained.manifest)
    assert tuned.manifest.parents == [data.manifest.run_id, pretrained.manifest.run_id]
    assert run_finetune(config, store, data.manifest, pretrained.manifest).cached
    assert (store.run_dir(tuned.manifest.run_id) / "metrics.jsonl").exists()

    report = run_eval(config, store, data.manifest, tuned.manifest)
    assert {"mse", "icc_truth", "icc_rater1", "icc_rater2"} <= set(report.metrics)
    assert (store.run_dir(tuned.manifest.run_id) / "report.json").exists()
    assert "test_mse" in store.read(tuned.manifest.run_id).metrics

    with pytest.raises(ConfigurationError):
        run_consist(config, store, data.manifest, pretrained.manifest)
    with pytest.raises(ConfigurationError):
        run_consist(make_config(pretrain__method="random", finetune__alpha=0.25), store, data.manifest, tuned.manifest)


###################
# CLI, seeding and plots
###################
def test_cli_dump_policy(capsys):
    assert main(["--dump-policy"]) == 0
    assert '"strong"' in capsys.readouterr().out


def test_cli_maps_configuration_errors_to_exit_codes(tmp_path):
    assert main(["--root", str(tmp_path), "--set", "finetune.alpha=0.3", "gen-data"]) == 2
    assert main(["--root", str(tmp_path)]) == 2


def test_cli_flags_become_dotted_overrides():
    args = build_parser().parse_args(
        ["--set", "consistency.mu=3", "--no-progress", "consist", "--lambda", "0.5", "--tau", "0.9", "--pseudo", "soft"]
    )
    overrides = collect_overrides(args)
    assert overrides == {
        "consistency.mu": "3",
        "consistency.lam": 0.5,
        "consistency.tau_c": 0.9,
        "consistency.pseudo_label": "soft",
        "progress": False,
    }


def test_shared_flags_follow_the_subcommand():
    args = build_parser().parse_args(["finetune", "--alpha", "0.10", "--init", "rsp", "--profile", "kather"])
    assert args.profile == "kather"
    assert collect_overrides(args) == {"finetune.alpha": 0.10, "pretrain.method": "rsp"}

    args = build_parser().parse_args(["--seed", "1", "--set", "consistency.mu=3", "pretrain", "--seed", "4",
                                      "--set", "pretrain.lr=0.5", "--no-progress", "--method", "moco"])
    assert collect_overrides(args) == {
        "consistency.mu": "3",
        "pretrain.lr": "0.5",
        "seed": 4,
        "pretrain.method": "moco",
        "progress": False,
    }


def test_flags_before_the_subcommand_survive_it():
    args = build_parser().parse_args(["--profile", "camelyon16", "--verbose", "gen-data"])
    assert args.profile == "camelyon16"
    assert args.verbose
    assert args.root is None


def test_consist_init_takes_a_checkpoint_path():
    args = build_parser().parse_args(
        ["consist", "--init", "runs/ft/checkpoint.pt", "--alpha", "0.10", "--mu", "7", "--lambda", "1",
         "--tau", "0.0", "--pseudo", "soft", "--profile", "breastpathq"]
    )
    assert args.finetune_init == "runs/ft/checkpoint.pt"
    assert args.profile == "breastpathq"
    assert collect_overrides(args) == {
        "finetune.alpha": 0.10,
        "consistency.mu": 7,
        "consistency.lam": 1.0,
        "consistency.tau_c": 0.0,
        "consistency.pseudo_label": "soft",
    }


def test_finetune_init_resolves_paths_and_run_ids(tmp_path, make_config, regression_corpus, streams):
    config = make_config(pretrain__method="random")
    store = ManifestStore(tmp_path / "store")
    data = run_gen_data(config, store)
    pretrained = run_pretrain(config, store, data.manifest)
    tuned = run_finetune(config, store, data.manifest, pretrained.manifest).manifest

    assert resolve_finetune_init(config, store, tuned.output_path).run_id == tuned.run_id
    assert resolve_finetune_init(config, store, tuned.run_id).run_id == tuned.run_id

    external = tmp_path / "external.pt"
    save_checkpoint(finetune(random_checkpoint("small_conv", 1), regression_corpus.split(0.10), config, streams), external)
    imported = resolve_finetune_init(config, store, str(external))
    assert imported.kind == "finetune"
    assert imported.output_sha256 == file_sha256(external)
    assert store.read(imported.run_id) == imported

    bare = tmp_path / "bare.pt"
    save_checkpoint(random_checkpoint("small_conv", 0), bare)
    with pytest.raises(ConfigurationError):
        resolve_finetune_init(config, store, str(bare))
    with pytest.raises(ConfigurationError):
        resolve_finetune_init(config, store, "finetune-unknown")


def test_seed_all_streams():
    streams = seed_all(7)
    again = seed_all(7)
    assert streams.describe() == again.describe()
    assert set(streams.describe()) == set(STREAM_NAMES)
    assert len(set(streams.describe().values())) == len(STREAM_NAMES)
    assert streams.numpy("sampling").integers(1 << 30) == again.numpy("sampling").integers(1 << 30)
    assert seed_all(8).seed_for("init") != streams.seed_for("init")


def test_learning_curves(tmp_path):
    path = tmp_path / "metrics.jsonl"
    log = MetricsLog("run-z", path=path)
    for epoch in range(3):
        log.log_many(epoch, "train", {"loss": 1.0 / (epoch + 1)})
        log.log(epoch, "val", "loss", 1.5 / (epoch + 1))
    assert len(load_metrics(path)) == 6
    out = plot_learning_curves(path)
    assert out.exists() and out.suffix == ".png"
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(ConfigurationError):
        load_metrics(empty)


###################
# Acceptance
###################
def _logged(store: ManifestStore, run_id: str) -> list[dict]:
    records = MetricsLog.read(store.run_dir(run_id) / "metrics.jsonl")
    return [{k: v for k, v in r.items() if k != "run_id"} for r in records]


@pytest.mark.slow
def test_cells_are_reproducible_across_artifact_roots(tmp_path, make_config):
    config = make_config()
    first = run_cell(config, with_consistency=True, root=tmp_path / "a")
    second = run_cell(config, with_consistency=True, root=tmp_path / "b")
    assert first["report"]["metrics"] == second["report"]["metrics"]
    for key in ("pretrain_run", "finetune_run", "consist_run"):
        a = _logged(ManifestStore(tmp_path / "a"), first[key])
        b = _logged(ManifestStore(tmp_path / "b"), second[key])
        assert a and a == b


@pytest.mark.slow
def test_rerunning_a_matrix_reuses_every_phase(tmp_path, make_config):
    config = make_config()
    matrix = ExperimentMatrix(methods=["random"], phases=["ft"], alphas=[0.10], seeds=[0])
    first = run_matrix(matrix, config, tmp_path)
    second = run_matrix(matrix, config, tmp_path, out_dir=tmp_path / "reports")
    assert first["executed"].iloc[0] > 0
    assert second["executed"].iloc[0] == 0
    assert (tmp_path / "reports" / "matrix_report.csv").exists()


def _synthetic_profile(**overrides):
    return resolve_config(profile="synthetic", overrides={"progress": False, **overrides}, environ={})


@pytest.mark.slow
def test_resolution_order_is_learnable():
    config = _synthetic_profile()
    assert (config.pretrain.epochs, config.data.patch_size) == (30, 32)
    corpus = build_corpus(config.data, seed=0)
    rng = np.random.default_rng(0)
    train = corpus.sample_tuples(1000, rng)
    val = corpus.sample_tuples(200, rng)
    ckpt = pretrain(config, train, val, seed_all(0))
    assert max(record["val_accuracy"] for record in ckpt.history) >= 0.90


def _median_val_mse(store: ManifestStore, results: pd.DataFrame) -> float:
    return float(np.median([store.read(run_id).metrics["val_loss"] for run_id in results["run_id"]]))


@pytest.mark.slow
def test_rsp_with_consistency_beats_random_init_at_low_labels(tmp_path):
    config = _synthetic_profile()
    seeds = [0, 1, 2]
    random_ft = run_matrix(ExperimentMatrix(methods=["random"], phases=["ft"], alphas=[0.10], seeds=seeds), config, tmp_path)
    rsp_cr = run_matrix(ExperimentMatrix(methods=["rsp"], phases=["cr"], alphas=[0.10], seeds=seeds), config, tmp_path)
    store = ManifestStore(tmp_path)
    assert _median_val_mse(store, rsp_cr) <= 0.9 * _median_val_mse(store, random_ft)
