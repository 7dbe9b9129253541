"""Frozen-feature linear probing, the multi-seed protocol and comparison reports."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .corpus import LabeledImages, split
from .encoders import DualEncoder
from .metrics import all_metrics
from .stats import stars, students_t_test, wilcoxon_signed_rank

logger = logging.getLogger(__name__)

POOLINGS = ("cls", "patch_mean", "all_mean", "concat")
METRICS = ("bacc", "auroc", "ap", "f1")
METRIC_TITLES = {"bacc": "BAcc (%)", "auroc": "AUROC (%)", "ap": "AP (%)", "f1": "F1-score (%)"}


# --------------------------------------------------------------------------
# Features
# --------------------------------------------------------------------------


def feature_dim(embed_dim: int, strategy: str) -> int:
    if strategy not in POOLINGS:
        raise ValueError(f"unknown pooling {strategy!r}; expected one of {POOLINGS}")
    return 2 * embed_dim if strategy == "concat" else embed_dim


def pool(cls: torch.Tensor, tokens: torch.Tensor, strategy: str) -> torch.Tensor:
    """``cls`` [B, D], ``tokens`` [B, N, D] -> pooled [B, d]."""
    if strategy == "cls":
        return cls
    if strategy == "patch_mean":
        return tokens.mean(dim=1)
    if strategy == "all_mean":
        return torch.cat([cls[:, None], tokens], dim=1).mean(dim=1)
    if strategy == "concat":
        return torch.cat([cls, tokens.mean(dim=1)], dim=1)
    raise ValueError(f"unknown pooling {strategy!r}; expected one of {POOLINGS}")


@torch.no_grad()
def extract_features(model: DualEncoder, images, strategy: str = "concat", batch_size: int = 256) -> np.ndarray:
    """Pooled vision features of a frozen encoder, as float64 [N, d]."""
    feature_dim(model.cfg.vision.embed_dim, strategy)
    was_training = model.training
    model.eval()
    images = torch.as_tensor(images, dtype=torch.float32)
    chunks = []
    for i in range(0, images.shape[0], batch_size):
        out = model.vision(images[i:i + batch_size])
        chunks.append(pool(out.cls, out.tokens, strategy).double().numpy())
    model.train(was_training)
    return np.concatenate(chunks, axis=0)


# --------------------------------------------------------------------------
# Linear probe
# --------------------------------------------------------------------------


@dataclass
class LinearHead:
    weight: np.ndarray  # [d, C]
    bias: np.ndarray  # [C]
    mean: np.ndarray  # feature standardization
    scale: np.ndarray
    n_iter: int = 0
    grad_norm: float = float("nan")

    def logits(self, features: np.ndarray) -> np.ndarray:
        if features.shape[1] != self.weight.shape[0]:
            raise ValueError(f"feature dimension {features.shape[1]} does not match head input {self.weight.shape[0]}")
        return ((features - self.mean) / self.scale) @ self.weight + self.bias

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return _softmax(self.logits(features))

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_linear_probe(features: np.ndarray, labels: np.ndarray, seed: int = 0, num_classes: Optional[int] = None,
                       l2: float = 1e-4, max_iter: int = 2000, tol: float = 1e-5) -> LinearHead:
    """Multinomial logistic regression by full-batch Nesterov gradient descent.

    Features are standardized with training statistics. The objective is mean
    cross-entropy + ``l2/2 * ||W||^2`` (bias unpenalized); the step size is
    the inverse of a Lipschitz bound on its gradient.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("linear probe needs at least two classes in the training labels")
    C = num_classes or int(y.max()) + 1
    n, d = X.shape
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Z = (X - mean) / scale
    Y = np.eye(C)[y]

    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 0.01, size=(d, C))
    b = np.zeros(C)
    # softmax CE Hessian is bounded by 0.5 * Z^T Z / n (bias column included)
    Za = np.hstack([Z, np.ones((n, 1))])
    lipschitz = 0.5 * np.linalg.norm(Za, 2) ** 2 / n + l2
    step = 1.0 / lipschitz

    def grad(W, b):
        P = _softmax(Z @ W + b)
        G = (P - Y) / n
        return Z.T @ G + l2 * W, G.sum(axis=0)

    W_prev, b_prev = W.copy(), b.copy()
    gnorm = float("inf")
    it = 0
    for it in range(1, max_iter + 1):
        mom = (it - 1) / (it + 2)
        Wm = W + mom * (W - W_prev)
        bm = b + mom * (b - b_prev)
        gW, gb = grad(Wm, bm)
        W_prev, b_prev = W, b
        W, b = Wm - step * gW, bm - step * gb
        if it % 10 == 0 or it == max_iter:
            gW, gb = grad(W, b)
            gnorm = math.sqrt(float((gW ** 2).sum() + (gb ** 2).sum()))
            if gnorm < tol:
                break
    return LinearHead(W, b, mean, scale, n_iter=it, grad_norm=gnorm)


# --------------------------------------------------------------------------
# Protocol
# --------------------------------------------------------------------------


@dataclass
class ProbeRun:
    model: str
    dataset: str
    seed: int
    strategy: str
    metrics: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.metrics.items():
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"metric {k}={v} outside [0, 100]")


def probe_seeds(n_seeds: int, master_seed: int = 0) -> list[int]:
    return [master_seed + k for k in range(n_seeds)]


def probe_split(labels: np.ndarray, seed: int, test_fraction: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Stratified train/test split keyed only on the seed, so it is shared by every model."""
    train, test = split(labels, (1.0 - test_fraction, test_fraction), seed)
    return train, test


def _score_seed(features: np.ndarray, labels: np.ndarray, seed: int, num_classes: int, test_fraction: float,
                average: str) -> dict[str, float]:
    train, test = probe_split(labels, seed, test_fraction)
    head = train_linear_probe(features[train], labels[train], seed=seed, num_classes=num_classes)
    return all_metrics(labels[test], head.predict_proba(features[test]), average)


def run_protocol(models: Mapping[str, DualEncoder], datasets: Mapping[str, LabeledImages], strategy: str = "concat",
                 n_seeds: int = 5, master_seed: int = 0, test_fraction: float = 0.3, average: str = "macro",
                 workers: int = 1) -> list[ProbeRun]:
    """Probe every (model, dataset, seed); seeds and test splits are shared across models."""
    seeds = probe_seeds(n_seeds, master_seed)
    runs = []
    for model_name, model in models.items():
        for ds_name, ds in datasets.items():
            feats = extract_features(model, ds.images, strategy)
            C = int(ds.labels.max()) + 1

            def job(seed, feats=feats, ds=ds, C=C):
                return _score_seed(feats, ds.labels, seed, C, test_fraction, average)

            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool_:
                    results = list(pool_.map(job, seeds))
            else:
                results = [job(s) for s in seeds]
            for seed, metrics in zip(seeds, results):
                runs.append(ProbeRun(model_name, ds_name, seed, strategy, metrics))
                logger.info("%s / %s / seed %d: %s", model_name, ds_name, seed,
                            ", ".join(f"{k}={v:.1f}" for k, v in metrics.items()))
    return runs


def save_runs(runs: Sequence[ProbeRun], path: str | Path) -> None:
    Path(path).write_text(json.dumps([asdict(r) for r in runs], indent=1) + "\n")


def load_runs(path: str | Path) -> list[ProbeRun]:
    return [ProbeRun(**r) for r in json.loads(Path(path).read_text())]


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------


@dataclass
class MetricCell:
    mean: float
    std: float
    n: int
    delta: Optional[float] = None
    p_value: Optional[float] = None

    @property
    def stars(self) -> str:
        return "" if self.p_value is None else stars(self.p_value)


@dataclass
class MetricReport:
    baseline: str
    test: str
    datasets: list[str]
    models: list[str]
    metrics: list[str]
    # cells[(model, dataset)][metric]; dataset "average" pools all datasets
    cells: dict[tuple[str, str], dict[str, MetricCell]]
    markdown: str = ""
    csv: str = ""


def _paired_values(runs, model, dataset, metric):
    return {(r.dataset, r.seed): r.metrics[metric] for r in runs
            if r.model == model and (dataset == "average" or r.dataset == dataset)}


def _fmt_delta(delta: float) -> str:
    r = round(delta, 1)
    if r == 0:
        return "(0.0)"
    return f"(+{r:.1f})" if r > 0 else f"(-{abs(r):.1f})"


def render_report(runs: Sequence[ProbeRun], baseline_name: str, test: str = "wilcoxon",
                  metrics: Sequence[str] = ("bacc", "auroc", "ap")) -> MetricReport:
    """Mean +/- std per model and dataset, deltas and significance against the baseline.

    Every non-baseline run must have a baseline run with the same (dataset,
    seed). The "average" row pools all (dataset, seed) pairs.
    """
    if test not in ("wilcoxon", "ttest"):
        raise ValueError("test must be 'wilcoxon' or 'ttest'")
    models = list(dict.fromkeys(r.model for r in runs))
    if baseline_name not in models:
        raise ValueError(f"baseline {baseline_name!r} has no runs")
    datasets = list(dict.fromkeys(r.dataset for r in runs))
    base_keys = {(r.dataset, r.seed) for r in runs if r.model == baseline_name}
    for r in runs:
        if (r.dataset, r.seed) not in base_keys:
            raise ValueError(f"missing baseline run for dataset {r.dataset!r}, seed {r.seed}")

    rows = datasets + (["average"] if len(datasets) > 1 else [])
    cells: dict[tuple[str, str], dict[str, MetricCell]] = {}
    for ds in rows:
        for m in models:
            cells[(m, ds)] = {}
            for metric in metrics:
                vals = _paired_values(runs, m, ds, metric)
                arr = np.array(list(vals.values()))
                cell = MetricCell(float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0, len(arr))
                if m != baseline_name:
                    base = _paired_values(runs, baseline_name, ds, metric)
                    keys = sorted(vals)
                    a = np.array([vals[k] for k in keys])
                    b = np.array([base[k] for k in keys])
                    cell.delta = cell.mean - float(np.mean(list(base.values())))
                    cell.p_value = wilcoxon_signed_rank(a, b) if test == "wilcoxon" else students_t_test(a, b)
                cells[(m, ds)][metric] = cell

    report = MetricReport(baseline_name, test, datasets, models, list(metrics), cells)
    report.markdown = _markdown(report, rows)
    report.csv = _csv(report, rows)
    return report


def _markdown(rep: MetricReport, rows: Sequence[str]) -> str:
    test_name = "Wilcoxon signed-rank" if rep.test == "wilcoxon" else "Student's t"
    lines = [
        f"Mean +/- std over seeds. Deltas in parentheses are relative to **{rep.baseline}**; "
        f"stars mark {test_name} significance against it (*: p < 0.05, **: p < 0.01, ***: p < 0.001). "
        "Bold: best overall; underlined: baseline.",
        "",
        "| Dataset | Model | " + " | ".join(METRIC_TITLES[m] for m in rep.metrics) + " |",
        "|" + "---|" * (2 + len(rep.metrics)),
    ]
    for ds in rows:
        best = {m: max(rep.models, key=lambda mod: rep.cells[(mod, ds)][m].mean) for m in rep.metrics}
        for mod in rep.models:
            parts = []
            for m in rep.metrics:
                c = rep.cells[(mod, ds)][m]
                value = f"{c.mean:.1f}{c.stars}"
                if mod == best[m]:
                    value = f"**{value}**"
                if mod == rep.baseline:
                    value = f"<u>{value}</u>"
                text = f"{value} ± {c.std:.1f}"
                if c.delta is not None:
                    text += f" {_fmt_delta(c.delta)}"
                parts.append(text)
            lines.append(f"| {ds} | {mod} | " + " | ".join(parts) + " |")
    return "\n".join(lines) + "\n"


def _csv(rep: MetricReport, rows: Sequence[str]) -> str:
    out = ["dataset,model,metric,mean,std,n,delta,p_value"]
    for ds in rows:
        for mod in rep.models:
            for m in rep.metrics:
                c = rep.cells[(mod, ds)][m]
                out.append(",".join(str(x) for x in (
                    ds, mod, m, repr(c.mean), repr(c.std), c.n,
                    "" if c.delta is None else repr(c.delta), "" if c.p_value is None else repr(c.p_value))))
    return "\n".join(out) + "\n"
