import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

"""
Experiment runner tests: seeded runs, reports, sweeps, grid search,
gradient-check suite and plot emission
"""

import json
import math

import numpy as np
import pytest

from config.experiment import ExperimentConfig, apply_overrides
from domain_data import get_source
from experiment_runner import (
    ExperimentRunner,
    RunArtifacts,
    aggregate_reports,
    aio_ordering_rate,
    emit_plots,
)
from san.checkpoint import load_checkpoint
from san.errors import InvalidArgumentError
from san.metrics import ScoreReport
from san.model import TrainingBatch

TINY = {
    "data.shared": "2",
    "data.src_private": "1",
    "data.tgt_private": "1",
    "data.samples_per_class": "20",
    "data.feature_dim": "8",
    "network.backbone_layers": "16,8",
    "network.head_layers": "16,8",
    "train.epochs": "3",
    "train.batch_size": "16",
    "train.top_n": "6",
}


@pytest.fixture
def runner(tmp_path):
    runner = ExperimentRunner(output_dir=tmp_path / "runs", workers=1, verbose=False)
    yield runner
    runner.close()


def tiny_config(**overrides):
    values = dict(TINY)
    values.update(overrides)
    return ExperimentConfig.from_values(values)


# ============================================
# SINGLE EXPERIMENTS
# ============================================

def test_run_experiment_writes_reports(runner, tmp_path):
    cfg = tiny_config(**{"experiment.seeds": "0,1"})
    out = tmp_path / "exp"
    artifacts = runner.run_experiment(cfg, out)
    assert sorted(artifacts.reports) == [0, 1]
    for seed in (0, 1):
        report = json.loads((out / f"report_seed{seed}.json").read_text())
        assert 0.0 <= report["h_score"] <= 1.0
        assert 0.0 <= report["balance_h_score"] <= 1.0
        assert report["variant"] == "san"
        assert 0.0 <= report["aio_ordering_rate"] <= 1.0
    summary = json.loads((out / "aggregate.json").read_text())
    assert summary["seeds_completed"] == [0, 1]
    assert summary["seeds_diverged"] == []
    assert (out / "config.ini").exists()
    assert len(artifacts.loss_traces[0]) == 3
    assert artifacts.embedding is not None
    assert artifacts.embedding.points.shape == (3 * 20, 2)


def test_visda_like_run_scores_in_range(runner, tmp_path):
    cfg = ExperimentConfig.from_values({"data.samples_per_class": "30",
                                        "network.backbone_layers": "32,16",
                                        "network.head_layers": "32,16"})
    artifacts = runner.run_experiment(cfg, tmp_path / "visda")
    report = artifacts.reports[0]
    assert math.isfinite(report.h_score)
    assert 0.0 <= report.h_score <= 1.0


def test_reports_are_reproducible(runner, tmp_path):
    cfg = tiny_config(**{"noise.rho_s": "0.2", "noise.p_view": "0.1"})
    runner.run_experiment(cfg, tmp_path / "a")
    runner.run_experiment(cfg, tmp_path / "b")
    first = (tmp_path / "a" / "report_seed0.json").read_bytes()
    second = (tmp_path / "b" / "report_seed0.json").read_bytes()
    assert first == second


def test_embedding_export_is_reproducible(runner, tmp_path):
    cfg = tiny_config(**{"noise.p_view": "0.1"})
    for name in ("a", "b"):
        emit_plots(runner.run_experiment(cfg, tmp_path / name), tmp_path / name)
    for name in ("report_seed0.json", "embedding.csv", "embedding.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_view_batch_relation_matches_views(runner):
    cfg = tiny_config(**{"noise.p_view": "0.2"})
    dataset = get_source(cfg.split, None, cfg.shift, 0).load()
    views, relation = runner._view_batch(dataset, np.arange(5), cfg,
                                         np.random.default_rng(0), np.random.default_rng(1))
    assert views.shape == (10, 8)
    assert relation.size == 10
    assert relation.h[0, 1] == 1.0 and relation.h[0, 2] == 0.0
    batch = TrainingBatch(np.zeros((2, 8)), np.array([0, 1]), views, relation)
    assert batch.stacked().shape == (12, 8)


def test_zero_epochs_evaluates_untrained_network(runner, tmp_path):
    artifacts = runner.run_experiment(tiny_config(**{"train.epochs": "0"}), tmp_path / "untrained")
    assert artifacts.loss_traces[0] == []
    assert 0.0 <= artifacts.reports[0].h_score <= 1.0


def test_divergent_seed_is_reported(runner, tmp_path):
    cfg = tiny_config(**{"train.lr0": "1e300", "train.grad_clip": "none"})
    with np.errstate(over="ignore", invalid="ignore"):
        artifacts = runner.run_experiment(cfg, tmp_path / "diverged")
    assert artifacts.all_diverged
    assert 0 in artifacts.diverged
    assert math.isnan(artifacts.mean("h_score"))
    summary = json.loads((tmp_path / "diverged" / "aggregate.json").read_text())
    assert summary["seeds_diverged"] == [0]
    assert not (tmp_path / "diverged" / "report_seed0.json").exists()


def test_ova_variant_runs(runner, tmp_path):
    artifacts = runner.run_experiment(tiny_config(**{"experiment.variant": "san-wo-aio"}), tmp_path / "ova")
    assert 0 in artifacts.reports
    assert artifacts.ordering_rates == {}


def test_checkpoint_saved_per_seed(runner, tmp_path):
    cfg = tiny_config(**{"experiment.save_checkpoint": "true"})
    runner.run_experiment(cfg, tmp_path / "ckpt")
    path = tmp_path / "ckpt" / "params_seed0.sanp"
    spec = cfg.network.spec(8, 3, 0)
    params = load_checkpoint(path, spec)
    assert params.weights[0].shape == (8, 16)


def test_feature_file_run(runner, tmp_path):
    from domain_data import DatasetSplitSpec, gen_unda_dataset, write_feature_file
    dataset = gen_unda_dataset(DatasetSplitSpec(2, 1, 1, samples_per_class=15, feature_dim=6), seed=2)
    path = write_feature_file(dataset, tmp_path / "features.csv")
    cfg = tiny_config(**{"data.feature_file": str(path)})
    artifacts = runner.run_experiment(cfg, tmp_path / "from_file")
    assert 0.0 <= artifacts.reports[0].h_score <= 1.0


def test_aggregate_uses_population_std():
    reports = {0: ScoreReport(1.0, 0.5, 0.6, 0.7, 1.0), 1: ScoreReport(0.5, 0.5, 0.4, 0.3, 1.0)}
    agg = aggregate_reports(reports)
    assert agg["mean"]["h_score"] == pytest.approx(0.5)
    assert agg["std"]["h_score"] == pytest.approx(0.1)
    assert agg["std"]["a_t"] == 0.0
    assert aggregate_reports({}) == {}


# ============================================
# SWEEPS AND GRID SEARCH
# ============================================

def test_noise_sweep_table(runner):
    rows = runner.run_noise_sweep(tiny_config(**{"train.epochs": "1"}), [0.0, 0.2])
    assert [(r["rho_s"], r["variant"]) for r in rows] == [
        (0.0, "san"), (0.0, "san-wo-aio"), (0.2, "san"), (0.2, "san-wo-aio")]
    lines = (runner.output_dir / "sweep_noise.csv").read_text().splitlines()
    assert len(lines) == 5
    assert lines[0].startswith("rho_s,variant,")


def test_noise_sweep_rejects_bad_arguments(runner):
    cfg = tiny_config()
    with pytest.raises(InvalidArgumentError):
        runner.run_noise_sweep(cfg, [])
    with pytest.raises(InvalidArgumentError):
        runner.run_noise_sweep(cfg, [0.0], variants=("san",))


def test_single_cell_sweep_matches_run(runner, tmp_path):
    cfg = tiny_config(**{"train.epochs": "1"})
    rows = runner.run_noise_sweep(cfg, [0.0], variants=("san", "san-w-cl"))
    direct = runner.run_experiment(cfg, tmp_path / "direct")
    assert rows[0]["h_score"] == direct.mean("h_score")


def test_unknown_sweep(runner):
    rows = runner.run_unknown_sweep(tiny_config(**{"train.epochs": "1"}), [1, 2])
    assert [r["tgt_private"] for r in rows] == [1, 2]
    assert all(r["completed"] == 1 for r in rows)
    with pytest.raises(InvalidArgumentError):
        runner.run_unknown_sweep(tiny_config(), [0])


def test_grid_single_point_matches_run(runner, tmp_path):
    cfg = tiny_config(**{"train.epochs": "1"})
    result = runner.grid_search(cfg, {"lambda": [cfg.train.lam]})
    direct = runner.run_experiment(cfg, tmp_path / "direct")
    assert len(result.rows) == 1
    assert result.best["balance_h_score"] == direct.mean("balance_h_score")
    assert result.best_config == cfg


def test_grid_selects_argmax(runner):
    cfg = tiny_config(**{"train.epochs": "2"})
    result = runner.grid_search(cfg, {"lambda": [0.0, 0.1], "beta": [0.5, 1.0]})
    assert len(result.rows) == 4
    top = max(r["balance_h_score"] for r in result.rows)
    assert result.best["balance_h_score"] == top
    assert result.best_config.train.lam == float(result.best["train.lambda"])
    lines = (runner.output_dir / "grid.csv").read_text().splitlines()
    assert len(lines) == 5


def test_grid_marks_divergent_cells(runner):
    cfg = tiny_config(**{"train.epochs": "2", "train.grad_clip": "none"})
    with np.errstate(over="ignore", invalid="ignore"):
        result = runner.grid_search(cfg, {"train.lr0": [0.05, 1e300]})
    diverged = [r for r in result.rows if r["diverged"]]
    assert len(diverged) == 1
    assert diverged[0]["train.lr0"] == 1e300
    assert result.best["train.lr0"] == 0.05


def test_grid_rejects_empty_axis(runner):
    with pytest.raises(InvalidArgumentError):
        runner.grid_search(tiny_config(), {"lambda": []})


# ============================================
# GRADIENT CHECKS
# ============================================

def test_gradcheck_suite_passes(runner):
    reports = runner.gradcheck_suite(num_configs=3, seed=1)
    assert len(reports) == 3
    for report in reports:
        assert set(report.errors) == {"ce", "aio", "scl", "cl", "cl-exp-density"}
        assert report.passed, report.errors


# ============================================
# PLOTS
# ============================================

def test_emit_plots_without_embedding(tmp_path):
    artifacts = RunArtifacts("san", {}, {}, {0: [{"epoch": 0, "total": 2.0, "ce": 1.5},
                                                {"epoch": 1, "total": 1.0, "ce": 0.8}]})
    written = emit_plots(artifacts, tmp_path / "plots")
    assert sorted(p.name for p in written) == ["loss_trace.csv", "loss_trace.svg"]
    lines = (tmp_path / "plots" / "loss_trace.csv").read_text().splitlines()
    assert lines[0] == "seed,epoch,total,ce"
    assert len(lines) == 3


def test_emit_plots_is_deterministic(runner, tmp_path):
    artifacts = runner.run_experiment(tiny_config(), tmp_path / "exp")
    first = emit_plots(artifacts, tmp_path / "p1")
    second = emit_plots(artifacts, tmp_path / "p2")
    assert [p.name for p in first] == ["loss_trace.csv", "loss_trace.svg", "embedding.csv", "embedding.svg"]
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()
    rows = (tmp_path / "p1" / "embedding.csv").read_text().splitlines()
    assert rows[0] == "x,y,true_class,decision"
    assert len(rows) == 1 + 3 * 20


# ============================================
# DIRECTIONAL REPRODUCTIONS (slow)
# ============================================

@pytest.mark.slow
def test_aio_ordering_on_easy_data(runner, tmp_path):
    cfg = ExperimentConfig.from_values({"data.class_std": "0.08"})
    artifacts = runner.run_experiment(cfg, tmp_path / "ordering")
    assert artifacts.ordering_rates[0] >= 0.95


@pytest.mark.slow
def test_ablation_ordering(runner, tmp_path):
    base = ExperimentConfig.from_values({"experiment.seeds": "0,1,2,3,4"})
    means = {}
    for variant in ("san", "san-wo-scl", "san-w-cl"):
        cfg = apply_overrides(base, {"experiment.variant": variant})
        means[variant] = runner.run_experiment(cfg, tmp_path / variant).mean("h_score")
    assert means["san"] > means["san-wo-scl"]
    assert means["san"] > means["san-w-cl"]


@pytest.mark.slow
def test_label_noise_trend(runner):
    cfg = ExperimentConfig.from_values({"experiment.seeds": "0,1,2,3,4"})
    rows = runner.run_noise_sweep(cfg, [0.0, 0.2, 0.4])
    score = {(r["rho_s"], r["variant"]): r["h_score"] for r in rows}
    drop_san = score[(0.0, "san")] - score[(0.4, "san")]
    drop_ova = score[(0.0, "san-wo-aio")] - score[(0.4, "san-wo-aio")]
    assert drop_san <= drop_ova


def test_ordering_rate_helper():
    from san.core_math import TopNConfig
    from san.model import NetworkSpec, Parameters
    spec = NetworkSpec(2, (2,), (2,), 4)
    params = Parameters.zeros(spec)
    # zero network: all channels tie, so the strict ordering never holds
    assert aio_ordering_rate(params, np.ones((3, 2)), np.array([0, 1, 0]), TopNConfig(4)) == 0.0
