"""Meta-test protocol, the AUC statistic and the fine-tuning / KNN baselines."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import nn
from .autodiff import Tensor, backward, no_grad
from .episodes import META_TEST, AugmentPolicy, Dataset, augment_batch, sample_episode
from .errors import DataError, MetafitError, NumericError, UsageError
from .metaloss import AdamState, MetaConfig, PROB_CLAMP, inner_adapt, meta_update, task_loss
from .nn import ArchSpec, ParamSet


class UndefinedMetricError(UsageError):
    """AUC requested for labels containing a single class."""


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score+ > score-) + 0.5 * P(tie), via midranks."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size != y.size:
        raise UsageError(f"auc: {s.size} scores vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise UsageError("auc: labels must be 0 or 1")
    if not np.isfinite(s).all():
        raise NumericError("auc: non-finite score")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc: both classes must be present")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    """Per-run AUCs plus the protocol that produced them.

    ``std`` is the population standard deviation of ``aucs``.  ``extra`` holds
    optional per-run columns (e.g. final support loss for fine-tuning).
    """

    aucs: list[float]
    method: str
    k: int
    q: int
    seed: int = 0
    extra: dict[str, list[float]] = field(default_factory=dict)

    @property
    def runs(self) -> int:
        return len(self.aucs)

    @property
    def mean(self) -> float:
        return float(np.mean(self.aucs))

    @property
    def std(self) -> float:
        return float(np.std(self.aucs))

    def to_dict(self) -> dict:
        rows = []
        for i, a in enumerate(self.aucs):
            row = {"run": i, "auc": a}
            row.update({name: col[i] for name, col in self.extra.items()})
            rows.append(row)
        return {
            "protocol": {"method": self.method, "k": self.k, "q": self.q, "runs": self.runs, "seed": self.seed},
            "mean": self.mean,
            "std": self.std,
            "per_run": rows,
        }

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        proto = d["protocol"]
        rows = d["per_run"]
        extra_names = [k for k in (rows[0] if rows else {}) if k not in ("run", "auc")]
        return cls(
            aucs=[r["auc"] for r in rows],
            method=proto["method"],
            k=proto["k"],
            q=proto["q"],
            seed=proto.get("seed", 0),
            extra={n: [r[n] for r in rows] for n in extra_names},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(self.extra)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["run", "auc", *names])
        for i, a in enumerate(self.aucs):
            writer.writerow([i, repr(a), *(repr(self.extra[n][i]) for n in names)])
        return buf.getvalue()

    def write(self, stem) -> tuple[Path, Path]:
        """Write ``<stem>.json`` and ``<stem>.csv``."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        jpath, cpath = stem.with_suffix(".json"), stem.with_suffix(".csv")
        jpath.write_text(self.to_json())
        cpath.write_text(self.to_csv())
        return jpath, cpath


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _check_test_set(dataset: Dataset, runs: int) -> None:
    if dataset.role != META_TEST:
        raise DataError(f"evaluation needs a meta-test dataset, got role {dataset.role!r}")
    if runs < 1:
        raise UsageError(f"runs must be >= 1, got {runs}")


def score(spec: ArchSpec, params, x) -> np.ndarray:
    """Ranking score of class 1.

    Uses the logit margin, which orders samples exactly like the class-1
    softmax probability but does not saturate into spurious ties.
    """
    with no_grad():
        logits = nn.forward(spec, params, x).data
    return logits[:, 1] - logits[:, 0]


def _run_rng(seed: int, run: int) -> np.random.Generator:
    return np.random.default_rng([seed, run])


def meta_test(
    spec: ArchSpec,
    checkpoint: ParamSet,
    dataset: Dataset,
    config: MetaConfig,
    runs: int = 30,
    seed: int = 0,
    k: int | None = None,
    method: str = "daml",
) -> EvalReport:
    """Adapt-then-measure on fresh meta-test episodes, one episode per run."""
    _check_test_set(dataset, runs)
    k = config.k if k is None else k
    aucs = []
    for run in range(runs):
        try:
            ep = sample_episode(dataset, k, config.q, _run_rng(seed, run))
            params = checkpoint
            if config.test_steps > 0:
                params = inner_adapt(spec, checkpoint, ep.support_x, ep.support_y, config.gamma,
                                     config.test_steps, reduction=config.loss_reduction)
            aucs.append(auc(score(spec, params, ep.query_x), ep.query_y))
        except MetafitError as exc:
            exc.args = (f"run {run}: {exc}",)
            raise
    return EvalReport(aucs, method, k, config.q, seed)


def pretrain_supervised(
    spec: ArchSpec,
    dataset: Dataset,
    iterations: int = 500,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    augment_policy: AugmentPolicy | None = None,
    dtype=np.float64,
) -> ParamSet:
    """Conventional multi-class training of the backbone on every training class.

    A temporary linear head over all classes is trained jointly with the
    backbone and then discarded; the returned parameters carry a freshly
    initialised 2-way head, ready for fine-tuning or feature extraction.
    """
    ids = dataset.class_ids
    xs = np.concatenate([dataset.stacked(c) for c in ids])
    ys = np.concatenate([np.full(len(dataset.classes[c]), i) for i, c in enumerate(ids)])
    rng = np.random.default_rng(seed)
    fresh = nn.init_params(spec, seed, dtype=dtype)
    bound = math.sqrt(6.0 / spec.feature_size())
    arrays = dict(fresh.arrays())
    arrays["aux.weight"] = rng.uniform(-bound, bound, size=(spec.feature_size(), len(ids))).astype(dtype)
    arrays["aux.bias"] = np.zeros(len(ids), dtype=dtype)
    params = ParamSet.from_arrays(arrays)
    state = AdamState.zeros(params)
    policy = augment_policy or AugmentPolicy.disabled()
    for _ in range(iterations):
        pick = rng.choice(len(xs), size=min(batch_size, len(xs)), replace=False)
        xb = augment_batch(xs[pick], policy, rng)
        onehot = np.eye(len(ids), dtype=dtype)[ys[pick]]
        h = nn.features(spec, params, xb)
        probs = (h @ params["aux.weight"] + params["aux.bias"]).softmax().clamp_min(PROB_CLAMP)
        loss = -(probs.log() * Tensor(onehot)).sum() * (1.0 / len(pick))
        grads = backward(loss, params)
        params, state = meta_update(params, grads, lr, state)
    out = {n: params[n].data for n in fresh if not n.startswith("head.")}
    out.update({n: fresh[n].data for n in fresh if n.startswith("head.")})
    return ParamSet.from_arrays({n: out[n] for n in fresh})


def finetune_baseline(
    spec: ArchSpec,
    init: ParamSet,
    dataset: Dataset,
    config: MetaConfig,
    ft_steps: int,
    runs: int = 30,
    seed: int = 0,
    k: int | None = None,
    augment_policy: AugmentPolicy | None = None,
) -> EvalReport:
    """Plain supervised training on each support set, then query AUC.

    Gradient descent with learning rate ``config.gamma`` for ``ft_steps``
    steps.  With an augmentation policy, every step sees a freshly augmented
    copy of the support images.  ``extra["support_loss"]`` records the final
    (un-augmented) support loss of every run.
    """
    _check_test_set(dataset, runs)
    if ft_steps < 1:
        raise UsageError(f"ft_steps must be >= 1, got {ft_steps}")
    k = config.k if k is None else k
    policy = augment_policy or AugmentPolicy.disabled()
    aucs, final_losses = [], []
    for run in range(runs):
        try:
            rng = _run_rng(seed, run)
            ep = sample_episode(dataset, k, config.q, rng)
            params = init.detach()
            for _ in range(ft_steps):
                xb = augment_batch(ep.support_x, policy, rng)
                params = inner_adapt(spec, params, xb, ep.support_y, config.gamma, 1,
                                     reduction=config.loss_reduction)
            with no_grad():
                final = task_loss(spec, params, ep.support_x, ep.support_y, config.loss_reduction)
            final_losses.append(float(final.data))
            aucs.append(auc(score(spec, params, ep.query_x), ep.query_y))
        except MetafitError as exc:
            exc.args = (f"run {run}: {exc}",)
            raise
    return EvalReport(aucs, "finetune", k, config.q, seed, {"support_loss": final_losses})


def default_neighbors(k: int) -> int:
    return min(5, 2 * k - 1)


def knn_scores(support_feats: np.ndarray, support_y: np.ndarray, query_feats: np.ndarray, n_neighbors: int) -> np.ndarray:
    """Fraction of each query's ``n_neighbors`` nearest support points labelled 1."""
    d = ((query_feats[:, None, :] - support_feats[None, :, :]) ** 2).sum(-1)
    nearest = np.argsort(d, axis=1, kind="stable")[:, :n_neighbors]
    return support_y[nearest].mean(axis=1)


def knn_feature_baseline(
    spec: ArchSpec,
    encoder: ParamSet,
    dataset: Dataset,
    k: int,
    q: int,
    n_neighbors: int | None = None,
    runs: int = 30,
    seed: int = 0,
) -> EvalReport:
    """Frozen penultimate features + Euclidean KNN voting."""
    _check_test_set(dataset, runs)
    n_neighbors = default_neighbors(k) if n_neighbors is None else n_neighbors
    if n_neighbors < 1 or n_neighbors % 2 == 0 or n_neighbors > 2 * k:
        raise UsageError(f"n_neighbors must be odd and in [1, {2 * k}], got {n_neighbors}")
    aucs = []
    for run in range(runs):
        try:
            ep = sample_episode(dataset, k, q, _run_rng(seed, run))
            with no_grad():
                fs = nn.features(spec, encoder, ep.support_x).data
                fq = nn.features(spec, encoder, ep.query_x).data
            aucs.append(auc(knn_scores(fs, ep.support_y, fq, n_neighbors), ep.query_y))
        except MetafitError as exc:
            exc.args = (f"run {run}: {exc}",)
            raise
    return EvalReport(aucs, "knn", k, q, seed)
