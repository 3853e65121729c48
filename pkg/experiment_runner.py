#!/usr/bin/env python3
"""
SAN Experiment Runner
Wires data, model, losses and metrics together: single experiments over
seeds, ablation variants, label-noise and unknown-proportion sweeps, grid
search, gradient-check suites and plot emission.
"""

import csv
import io
import itertools
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import colorlog
import numpy as np
from pythonjsonlogger import jsonlogger
from sklearn.decomposition import PCA

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import matplotlib  # noqa: E402
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from config import settings  # noqa: E402
from config.experiment import ExperimentConfig, Variant, apply_overrides, dump_experiment_config  # noqa: E402
from domain_data import (  # noqa: E402
    DomainDataset,
    RngStream,
    ViewPair,
    augment,
    get_source,
    inject_label_noise,
    inject_view_noise,
    stream_rng,
)
from san.checkpoint import save_checkpoint  # noqa: E402
from san.core_math import TopNConfig, top_n_softmax  # noqa: E402
from san.errors import InvalidArgumentError, TrainingDivergenceError  # noqa: E402
from san.losses import AugmentationRelation, DensityMode, aio_ordering_holds  # noqa: E402
from san.metrics import ScoreReport, eval_counts  # noqa: E402
from san.model import (  # noqa: E402
    Activation,
    GradCheckReport,
    NetworkSpec,
    OpenHead,
    Parameters,
    TrainConfig,
    TrainingBatch,
    backward,
    clip_gradient,
    forward,
    grad_check,
    predict,
    sgd_step,
)

SCORE_KEYS = ("a_c", "a_t", "h_score", "balance_h_score", "theta")

# Short grid names for the objective weights
GRID_ALIASES = {"lambda": "train.lambda", "beta": "train.beta", "alpha": "scl.alpha"}

# Deterministic SVG output
matplotlib.rcParams["svg.hashsalt"] = "san"


# ============================================
# RESULT TYPES
# ============================================

@dataclass
class EmbeddingExport:
    """2-D projection of target backbone embeddings with labels and decisions"""
    points: np.ndarray
    true_class: List[Optional[int]]
    decisions: List[str]


@dataclass
class SeedResult:
    seed: int
    report: Optional[ScoreReport] = None
    diagnostic: Optional[str] = None
    loss_trace: List[Dict[str, float]] = field(default_factory=list)
    ordering_rate: Optional[float] = None
    embedding: Optional[EmbeddingExport] = None
    params: Optional[Parameters] = None

    @property
    def diverged(self) -> bool:
        return self.report is None


@dataclass
class RunArtifacts:
    """Per-seed reports, their aggregate, loss traces and an optional embedding export"""
    variant: str
    reports: Dict[int, ScoreReport]
    aggregate: Dict[str, Dict[str, float]]
    loss_traces: Dict[int, List[Dict[str, float]]]
    diverged: Dict[int, str] = field(default_factory=dict)
    ordering_rates: Dict[int, float] = field(default_factory=dict)
    embedding: Optional[EmbeddingExport] = None

    @property
    def all_diverged(self) -> bool:
        return not self.reports

    def mean(self, key: str) -> float:
        return self.aggregate["mean"][key] if self.reports else float("nan")


def aggregate_reports(reports: Mapping[int, ScoreReport]) -> Dict[str, Dict[str, float]]:
    """Mean and population standard deviation of every score over the given seeds"""
    if not reports:
        return {}
    table = {key: np.array([getattr(r, key) for _, r in sorted(reports.items())]) for key in SCORE_KEYS}
    return {"mean": {key: float(np.mean(v)) for key, v in table.items()},
            "std": {key: float(np.std(v)) for key, v in table.items()}}


@dataclass
class GridResult:
    rows: List[Dict]
    best: Optional[Dict]
    best_config: Optional[ExperimentConfig]


# ============================================
# RUNNER
# ============================================

class ExperimentRunner:
    """Runs experiments and writes their artifacts under an output directory"""

    def __init__(self, output_dir: Optional[Union[str, Path]] = None, workers: Optional[int] = None,
                 verbose: Optional[bool] = None):
        self.settings = settings
        self.output_dir = Path(output_dir or self.settings.OUTPUT_DIR)
        self.workers = max(1, int(workers or self.settings.WORKERS))
        self.verbose = self.settings.VERBOSE if verbose is None else verbose

        self._setup_logging()

    def _setup_logging(self):
        """JSON run log under the output directory, coloured console when verbose"""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.logger = logging.getLogger('ExperimentRunner')
        self.close()

        logHandler = RotatingFileHandler(
            self.output_dir / self.settings.LOG_FILE,
            maxBytes=10485760,  # 10MB
            backupCount=5
        )
        logHandler.setFormatter(jsonlogger.JsonFormatter())
        logHandler._san_runner = True
        self.logger.addHandler(logHandler)
        self.logger.setLevel(getattr(logging, self.settings.LOG_LEVEL, logging.INFO))

        if self.verbose:
            console_handler = logging.StreamHandler()
            console_handler.setFormatter(colorlog.ColoredFormatter(
                '%(log_color)s%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
            console_handler._san_runner = True
            self.logger.addHandler(console_handler)

    def close(self):
        """Detach and close the handlers this runner installed"""
        for handler in list(self.logger.handlers):
            if getattr(handler, "_san_runner", False):
                self.logger.removeHandler(handler)
                handler.close()

    def _map(self, fn: Callable, items: Sequence) -> List:
        """Order-preserving map over cells, threaded when workers > 1"""
        if self.workers == 1 or len(items) < 2:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    # ----------------------------------------
    # Training
    # ----------------------------------------

    def _view_batch(self, dataset: DomainDataset, indices: np.ndarray, cfg: ExperimentConfig,
                    aug_rng: np.random.Generator, noise_rng: np.random.Generator) -> Tuple[np.ndarray, AugmentationRelation]:
        pairs = []
        for idx in indices:
            sample = dataset.target[int(idx)]
            view_a, view_b = augment(sample, cfg.noise, aug_rng, dataset.lifting)
            pairs.append(ViewPair(view_a, view_b, sample))
        if cfg.noise.p_view > 0:
            pairs, _ = inject_view_noise(pairs, cfg.noise.p_view, noise_rng, cfg.noise,
                                         dataset.lifting, pool=dataset.target)
        views = np.empty((2 * len(pairs), dataset.feature_dim))
        views[0::2] = [p.view_a for p in pairs]
        views[1::2] = [p.view_b for p in pairs]
        return views, AugmentationRelation.consecutive_pairs(len(pairs))

    def train(self, params: Parameters, dataset: DomainDataset, x_source: np.ndarray,
              y_source: np.ndarray, cfg: ExperimentConfig, seed: int) -> Tuple[Parameters, List[Dict[str, float]]]:
        """
        Mini-batch SGD over the source set, cycling target samples for the contrastive term

        Raises:
            TrainingDivergenceError: non-finite loss, activation or gradient
        """
        train_cfg = replace(cfg.train, seed=seed)
        terms = cfg.variant.objective_terms()
        ns = len(x_source)
        bs = train_cfg.batch_size
        steps_per_epoch = math.ceil(ns / bs)
        total_steps = train_cfg.epochs * steps_per_epoch
        use_target = terms.contrastive is not None and train_cfg.lam > 0
        nt = len(dataset.target)

        shuffle_rng = stream_rng(seed, RngStream.SHUFFLE)
        aug_rng = stream_rng(seed, RngStream.AUGMENT)
        noise_rng = stream_rng(seed, RngStream.VIEW_NOISE)
        target_order = shuffle_rng.permutation(nt) if use_target else None
        target_pos = 0

        trace = []
        t = 0
        for epoch in range(train_cfg.epochs):
            order = shuffle_rng.permutation(ns)
            sums: Dict[str, float] = {}
            for step in range(steps_per_epoch):
                rows = order[step * bs:(step + 1) * bs]
                x_target = relation = None
                if use_target:
                    if target_pos + bs > nt:
                        target_order = shuffle_rng.permutation(nt)
                        target_pos = 0
                    picked = target_order[target_pos:target_pos + min(bs, nt)]
                    target_pos += len(picked)
                    x_target, relation = self._view_batch(dataset, picked, cfg, aug_rng, noise_rng)
                batch = TrainingBatch(x_source[rows], y_source[rows], x_target, relation)
                with np.errstate(over="ignore", invalid="ignore"):
                    grad, result = backward(params, batch, terms, train_cfg)
                grad = clip_gradient(grad, train_cfg.grad_clip)
                params = sgd_step(params, grad, t, train_cfg, total_steps)
                t += 1
                sums["total"] = sums.get("total", 0.0) + result.total
                for name, value in result.components.items():
                    sums[name] = sums.get(name, 0.0) + value
            entry = {"epoch": epoch}
            entry.update({name: value / steps_per_epoch for name, value in sums.items()})
            trace.append(entry)
            self.logger.debug("Epoch finished",
                              extra={"event": "epoch_end", "seed": seed, **entry})
        return params, trace

    # ----------------------------------------
    # Evaluation
    # ----------------------------------------

    def evaluate(self, params: Parameters, dataset: DomainDataset, cfg: ExperimentConfig,
                 export_embedding: bool = False) -> Tuple[ScoreReport, Optional[float], Optional[EmbeddingExport]]:
        """Score target decisions; also the source ordering rate and an optional 2-D export"""
        topn = cfg.train.topn
        x_target = dataset.target_features()
        decisions = predict(params, x_target, topn, cfg.threshold)
        labeled = [(d, truth) for d, truth in zip(decisions, dataset.target_truths())
                   if truth[0] is not None]
        if len(labeled) < len(decisions):
            self.logger.warning("Scoring %d of %d target samples (the rest are unlabeled)",
                                len(labeled), len(decisions))
        counts = eval_counts([d for d, _ in labeled], [t for _, t in labeled])
        report = ScoreReport.from_counts(counts)

        ordering = None
        if params.spec.open_head is OpenHead.AIO:
            x_source = np.stack([s.features for s in dataset.source])
            y_true = np.array([s.true_label for s in dataset.source])
            ordering = aio_ordering_rate(params, x_source, y_true, topn)

        embedding = None
        if export_embedding and len(x_target) >= 2:
            zhat = forward(params, x_target).zhat.astype(np.float64)
            points = PCA(n_components=2, svd_solver="full").fit_transform(zhat) \
                if zhat.shape[1] >= 2 else np.hstack([zhat, np.zeros_like(zhat)])
            embedding = EmbeddingExport(points, [s.true_label for s in dataset.target],
                                        [str(d) for d in decisions])
        return report, ordering, embedding

    # ----------------------------------------
    # Experiments
    # ----------------------------------------

    def run_seed(self, cfg: ExperimentConfig, seed: int, export_embedding: bool = False) -> SeedResult:
        """Generate or load data, train and evaluate one seed; divergence is reported, not raised"""
        self.logger.info("Seed started", extra={"event": "seed_start", "seed": seed,
                                                "variant": cfg.variant.value})
        dataset = get_source(cfg.split, cfg.feature_file, cfg.shift, seed).load()
        source = dataset.source
        if cfg.noise.rho_s > 0:
            source = inject_label_noise(source, cfg.noise.rho_s,
                                        stream_rng(seed, RngStream.LABEL_NOISE), dataset.num_known)
        x_source, y_source = replace(dataset, source=source).source_arrays()

        spec = cfg.network.spec(dataset.feature_dim, dataset.num_known, seed, cfg.variant.open_head)
        params = Parameters.initialize(spec, cfg.train.dtype)
        try:
            params, trace = self.train(params, dataset, x_source, y_source, cfg, seed)
        except TrainingDivergenceError as e:
            self.logger.error("Seed diverged",
                              extra={"event": "seed_diverged", "seed": seed, "reason": str(e),
                                     "layer_index": e.layer_index})
            return SeedResult(seed, diagnostic=str(e))

        report, ordering, embedding = self.evaluate(params, dataset, cfg, export_embedding)
        self.logger.info("Seed complete",
                         extra={"event": "seed_complete", "seed": seed, "variant": cfg.variant.value,
                                "h_score": report.h_score, "balance_h_score": report.balance_h_score})
        return SeedResult(seed, report, None, trace, ordering, embedding, params)

    def run_experiment(self, cfg: ExperimentConfig, output_dir: Optional[Path] = None) -> RunArtifacts:
        """
        Run every seed of a config and write its reports

        Writes config.ini, report_seed<k>.json per completed seed,
        aggregate.json and (when enabled) params_seed<k>.sanp.
        """
        out = Path(output_dir) if output_dir is not None else self.output_dir
        out.mkdir(parents=True, exist_ok=True)
        self.logger.info("Run started", extra={"event": "run_start", "variant": cfg.variant.value,
                                               "seeds": list(cfg.seeds), "output_dir": str(out)})
        dump_experiment_config(cfg, out / "config.ini")

        reports, traces, diverged, ordering = {}, {}, {}, {}
        embedding = None
        for seed in cfg.seeds:
            result = self.run_seed(cfg, seed, export_embedding=cfg.export_embeddings and embedding is None)
            if result.diverged:
                diverged[seed] = result.diagnostic
                continue
            reports[seed] = result.report
            traces[seed] = result.loss_trace
            if result.ordering_rate is not None:
                ordering[seed] = result.ordering_rate
            if embedding is None:
                embedding = result.embedding
            payload = result.report.to_dict()
            payload.update({"seed": seed, "variant": cfg.variant.value,
                            "aio_ordering_rate": result.ordering_rate})
            (out / f"report_seed{seed}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
            if cfg.save_checkpoint:
                save_checkpoint(result.params, out / f"params_seed{seed}.sanp")

        artifacts = RunArtifacts(cfg.variant.value, reports, aggregate_reports(reports), traces,
                                 diverged, ordering, embedding)
        summary = {"variant": cfg.variant.value, "seeds_completed": sorted(reports),
                   "seeds_diverged": sorted(diverged), **artifacts.aggregate}
        (out / "aggregate.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return artifacts

    def _run_cell(self, cfg: ExperimentConfig, overrides: Dict[str, str], subdir: str) -> RunArtifacts:
        cell_cfg = apply_overrides(cfg, overrides)
        return self.run_experiment(cell_cfg, self.output_dir / subdir)

    def run_noise_sweep(self, cfg: ExperimentConfig, rho_list: Sequence[float],
                        variants: Sequence[str] = ("san", "san-wo-aio")) -> List[Dict]:
        """
        Run each variant at each source label-noise rate

        Returns:
            One row per (rho_s, variant) with mean H-score and Balance H-score
        """
        if not rho_list:
            raise InvalidArgumentError("rho_list must not be empty")
        variants = [Variant(v).value for v in variants]
        if len(set(variants)) < 2:
            raise InvalidArgumentError("a noise sweep compares at least 2 variants")
        cells = [(float(rho), v) for rho in rho_list for v in variants]

        def run(cell):
            rho, variant = cell
            artifacts = self._run_cell(cfg, {"noise.rho_s": repr(rho), "experiment.variant": variant},
                                       f"sweep_noise/rho{rho:g}_{variant}")
            row = _summary_row(artifacts, {"rho_s": rho, "variant": variant})
            self.logger.info("Sweep cell finished", extra={"event": "sweep_cell", **row})
            return row

        rows = self._map(run, cells)
        _write_table(rows, self.output_dir / "sweep_noise.csv")
        return rows

    def run_unknown_sweep(self, cfg: ExperimentConfig, tgt_private_list: Sequence[int]) -> List[Dict]:
        """Vary the number of target-private classes and report both scores per cell"""
        if not tgt_private_list:
            raise InvalidArgumentError("tgt_private_list must not be empty")
        if cfg.split is None:
            raise InvalidArgumentError("the unknown-proportion sweep needs a synthetic split")
        if any(int(n) < 1 for n in tgt_private_list):
            raise InvalidArgumentError("every cell needs at least one target-private class")
        base = {"data.shared": str(cfg.split.shared), "data.src_private": str(cfg.split.src_private)}

        def run(n_private):
            artifacts = self._run_cell(cfg, {**base, "data.tgt_private": str(int(n_private))},
                                       f"sweep_unknown/tgt{int(n_private)}")
            row = _summary_row(artifacts, {"tgt_private": int(n_private)})
            self.logger.info("Sweep cell finished", extra={"event": "sweep_cell", **row})
            return row

        rows = self._map(run, list(tgt_private_list))
        _write_table(rows, self.output_dir / "sweep_unknown.csv")
        return rows

    def grid_search(self, cfg: ExperimentConfig, grid: Mapping[str, Sequence[float]]) -> GridResult:
        """
        Evaluate every grid point and select by mean Balance H-score

        Grid keys are "lambda", "beta", "alpha" or any dotted config key. Ties
        go to the smaller lambda, then beta, then alpha. Cells in which every
        seed diverged are marked and never selected.
        """
        if not grid or any(len(values) == 0 for values in grid.values()):
            raise InvalidArgumentError("grid must name at least one value per key")
        keys = [GRID_ALIASES.get(k, k) for k in grid]
        points = [dict(zip(keys, combo)) for combo in itertools.product(*grid.values())]

        def run(point):
            overrides = {k: str(v) for k, v in point.items()}
            name = "_".join(f"{k.split('.')[-1]}{v}" for k, v in overrides.items())
            artifacts = self._run_cell(cfg, overrides, f"grid/{name}")
            row = _summary_row(artifacts, dict(point))
            self.logger.info("Grid cell finished", extra={"event": "grid_cell", **row})
            return row

        rows = self._map(run, points)
        _write_table(rows, self.output_dir / "grid.csv")

        def weight(row, key):
            return float(row.get(key, cfg.to_values()[key]))

        finished = [r for r in rows if not r["diverged"]]
        if not finished:
            return GridResult(rows, None, None)
        best = min(finished, key=lambda r: (-r["balance_h_score"], weight(r, "train.lambda"),
                                            weight(r, "train.beta"), weight(r, "scl.alpha")))
        best_cfg = apply_overrides(cfg, {k: str(best[k]) for k in keys})
        return GridResult(rows, best, best_cfg)

    # ----------------------------------------
    # Gradient checks
    # ----------------------------------------

    def gradcheck_suite(self, num_configs: int = 50, seed: int = 0, step: float = 1e-5,
                        threshold: float = 1e-4) -> List[GradCheckReport]:
        """
        Gradient checks of every loss term on small random tanh networks

        Covers CE, AIO, SCL and CL in both density modes through the full
        backbone, head and classifier stack.
        """
        reports = []
        for i in range(num_configs):
            rng = stream_rng(seed, RngStream.GENERATE, 99, i)
            k = int(rng.integers(2, 4))
            input_dim = int(rng.integers(3, 6))
            spec = NetworkSpec(input_dim, (int(rng.integers(3, 6)), 3), (int(rng.integers(3, 6)), 4),
                               2 * k, Activation.TANH, seed=int(rng.integers(1 << 30)))
            params = Parameters.initialize(spec)
            pairs = 3
            batch = TrainingBatch(rng.standard_normal((4, input_dim)), rng.integers(0, k, size=4),
                                  rng.standard_normal((2 * pairs, input_dim)),
                                  AugmentationRelation.consecutive_pairs(pairs))
            cfg = TrainConfig(topn=TopNConfig(2 * k))
            report = grad_check(params, batch, cfg, step, threshold, terms=("ce", "aio", "scl", "cl"),
                                seed=i, cl_mode=DensityMode.KERNEL_BCE)
            dense = grad_check(params, batch, cfg, step, threshold, terms=("cl",), seed=i,
                               cl_mode=DensityMode.EXP_DENSITY)
            report.errors["cl-exp-density"] = dense.errors["cl"]
            reports.append(report)
        return reports


# ============================================
# HELPERS
# ============================================

def aio_ordering_rate(params: Parameters, x, labels, topn: TopNConfig) -> float:
    """Fraction of samples with c^y > max c~ > max_{k != y} c^k"""
    logits = forward(params, np.asarray(x)).aio_logits.astype(np.float64)
    return float(np.mean(aio_ordering_holds(top_n_softmax(logits, topn), labels)))


def _summary_row(artifacts: RunArtifacts, cell: Dict) -> Dict:
    row = dict(cell)
    row["completed"] = len(artifacts.reports)
    row["diverged"] = artifacts.all_diverged
    for key in ("h_score", "balance_h_score", "a_c", "a_t"):
        row[key] = artifacts.mean(key)
    return row


def _write_table(rows: List[Dict], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return path
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    path.write_text(buffer.getvalue())
    return path


def emit_plots(artifacts: RunArtifacts, out_dir: Union[str, Path]) -> List[Path]:
    """
    Write the loss trace and, when present, the embedding scatter

    Files: loss_trace.csv / loss_trace.svg always, embedding.csv /
    embedding.svg when the artifacts carry an embedding export. Output is
    deterministic for identical artifacts.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    columns = ["seed", "epoch"]
    for trace in artifacts.loss_traces.values():
        for entry in trace:
            columns.extend(k for k in entry if k not in columns)
    rows = [{"seed": seed, **entry} for seed, trace in sorted(artifacts.loss_traces.items()) for entry in trace]
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator="\n", restval="")
    writer.writeheader()
    writer.writerows(rows)
    (out / "loss_trace.csv").write_text(buffer.getvalue())
    written.append(out / "loss_trace.csv")

    fig, ax = plt.subplots(figsize=(6, 4))
    for seed, trace in sorted(artifacts.loss_traces.items()):
        ax.plot([e["epoch"] for e in trace], [e["total"] for e in trace], label=f"seed {seed}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training objective")
    ax.set_title(f"{artifacts.variant}: loss trace")
    if artifacts.loss_traces:
        ax.legend()
    fig.savefig(out / "loss_trace.svg", format="svg", metadata={"Date": None})
    plt.close(fig)
    written.append(out / "loss_trace.svg")

    emb = artifacts.embedding
    if emb is not None:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["x", "y", "true_class", "decision"])
        for (x, y), label, decision in zip(emb.points, emb.true_class, emb.decisions):
            writer.writerow([repr(float(x)), repr(float(y)), "" if label is None else label, decision])
        (out / "embedding.csv").write_text(buffer.getvalue())
        written.append(out / "embedding.csv")

        fig, ax = plt.subplots(figsize=(6, 6))
        unknown = np.array([d == "unknown" for d in emb.decisions])
        colors = np.array([-1 if label is None else label for label in emb.true_class])
        ax.scatter(emb.points[~unknown, 0], emb.points[~unknown, 1], c=colors[~unknown],
                   cmap="tab20", s=8, marker="o", label="known")
        ax.scatter(emb.points[unknown, 0], emb.points[unknown, 1], c=colors[unknown],
                   cmap="tab20", s=12, marker="x", label="unknown")
        ax.set_title(f"{artifacts.variant}: target embedding (PCA)")
        ax.legend()
        fig.savefig(out / "embedding.svg", format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(out / "embedding.svg")

    logging.getLogger('ExperimentRunner').info(
        "Plots written", extra={"event": "plots_written", "files": [str(p) for p in written]})
    return written
