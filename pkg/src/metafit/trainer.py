"""Episodic meta-training loop with the difficulty-aware objective switch.

Each iteration samples a batch of tasks, adapts to each support set, measures
the adapted model on the query set and takes one meta step.  Before
``da_activation_iteration`` the meta objective is the plain sum of task
losses; from that iteration on it is the difficulty-aware sum.

Episode sampling for iteration ``i`` uses ``default_rng([seed, i])``, so the
sample sequence does not depend on execution order and a resumed run
replays exactly the episodes an uninterrupted run would see.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .autodiff import backward
from .episodes import META_TRAIN, AugmentPolicy, Dataset, augment_batch, sample_episode
from .errors import ConfigError, DataError, NumericError
from .metaloss import AdamState, MetaConfig, da_task_loss, inner_adapt, meta_update, task_loss
from .nn import ArchSpec, ParamSet

THREADS_ENV = "METAFIT_THREADS"


@dataclass(frozen=True)
class TrainSchedule:
    total_iterations: int = 3000
    da_activation_iteration: float | None = None
    lr_decay_iterations: tuple[int, ...] = (1500, 2500)
    lr_decay_factor: float = 0.1
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_iterations", tuple(int(m) for m in self.lr_decay_iterations))
        if self.total_iterations < 0:
            raise ConfigError(f"total_iterations must be >= 0, got {self.total_iterations}")
        act = self.da_activation_iteration
        if act is not None and not math.isinf(act) and not 0 <= act <= self.total_iterations:
            raise ConfigError(f"da_activation_iteration {act} outside [0, {self.total_iterations}]")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigError(f"lr_decay_factor must lie in (0, 1), got {self.lr_decay_factor}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")

    @classmethod
    def scaled(cls, total_iterations: int, **kw) -> "TrainSchedule":
        """Default milestones (1/2 and 5/6 of the run) for a run of any length."""
        kw.setdefault("lr_decay_iterations", (total_iterations // 2, total_iterations * 5 // 6))
        return cls(total_iterations=total_iterations, **kw)

    @property
    def activation(self) -> float:
        if self.da_activation_iteration is None:
            return self.total_iterations // 2
        return self.da_activation_iteration

    def without_da(self) -> "TrainSchedule":
        """Plain MAML objective throughout."""
        return TrainSchedule(**{**asdict(self), "da_activation_iteration": math.inf})


def lr_at(iteration: int, schedule: TrainSchedule, alpha0: float) -> float:
    """Step-decayed meta learning rate."""
    passed = sum(1 for m in schedule.lr_decay_iterations if m <= iteration)
    return alpha0 * schedule.lr_decay_factor ** passed


@dataclass
class TrainLogRecord:
    iteration: int
    task_losses: list[float]
    meta_loss: float
    alpha: float
    wall_ms: float
    objective: str = "sum"
    error: str | None = None

    def to_json(self) -> str:
        d = asdict(self)
        if d["error"] is None:
            del d["error"]
        # strict JSON: non-finite losses become null
        d["meta_loss"] = d["meta_loss"] if math.isfinite(d["meta_loss"]) else None
        d["task_losses"] = [v if math.isfinite(v) else None for v in d["task_losses"]]
        return json.dumps(d, allow_nan=False)


@dataclass
class TrainCheckpoint:
    """Everything needed to continue training bit-identically."""

    spec: ArchSpec
    params: ParamSet
    opt_state: AdamState | None
    iteration: int
    seed: int
    optimizer: str = "adam"

    def save(self, path) -> None:
        tensors = dict(self.params.arrays())
        meta = {
            "iteration": self.iteration,
            "rng": {"scheme": "default_rng([seed, iteration])", "seed": self.seed, "next_iteration": self.iteration},
            "optimizer": {"mode": self.optimizer},
        }
        if self.opt_state is not None:
            st = self.opt_state
            meta["optimizer"].update(step=st.step, beta1=st.beta1, beta2=st.beta2, eps=st.eps)
            for n in self.params:
                tensors[f"optim.m/{n}"] = st.m[n]
                tensors[f"optim.v/{n}"] = st.v[n]
        nn.write_container(path, self.spec, tensors, meta)

    @classmethod
    def load(cls, path) -> "TrainCheckpoint":
        spec, tensors, meta = nn.read_container(path)
        names = list(nn.param_shapes(spec))
        missing = [n for n in names if n not in tensors]
        if missing:
            raise DataError(f"{path}: checkpoint lacks parameters {missing}")
        params = ParamSet.from_arrays({n: tensors[n] for n in names})
        opt = meta.get("optimizer", {})
        state = None
        if "step" in opt:
            state = AdamState(
                step=opt["step"],
                m={n: tensors[f"optim.m/{n}"].copy() for n in names},
                v={n: tensors[f"optim.v/{n}"].copy() for n in names},
                beta1=opt["beta1"],
                beta2=opt["beta2"],
                eps=opt["eps"],
            )
        return cls(spec, params, state, int(meta.get("iteration", 0)), int(meta.get("rng", {}).get("seed", 0)),
                   opt.get("mode", "adam"))


@dataclass
class TrainResult:
    params: ParamSet
    opt_state: AdamState | None
    iteration: int
    records: list[TrainLogRecord] = field(default_factory=list)
    checkpoint_path: Path | None = None


def thread_count(explicit: int | None = None) -> int:
    if explicit is not None:
        return max(1, int(explicit))
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def _task_gradient(spec, params, episode, config: MetaConfig, use_da: bool):
    """Adapt to one task; return (query loss, objective term value, gradient arrays)."""
    adapted = inner_adapt(
        spec, params, episode.support_x, episode.support_y, config.gamma, config.inner_steps,
        second_order=config.second_order, reduction=config.loss_reduction,
    )
    L = task_loss(spec, adapted, episode.query_x, episode.query_y, config.loss_reduction)
    term = da_task_loss(L, config.eta, config.epsilon) if use_da else L
    wrt = params if config.second_order else adapted
    grads = backward(term, wrt)
    return float(L.data), float(term.data), {n: g.data for n, g in grads.items()}


def train(
    spec: ArchSpec,
    dataset: Dataset,
    config: MetaConfig,
    schedule: TrainSchedule,
    *,
    init: ParamSet | None = None,
    resume: TrainCheckpoint | None = None,
    out_dir=None,
    augment_policy: AugmentPolicy | None = None,
    augment_query: bool = True,
    on_iteration: Callable[[TrainLogRecord], None] | None = None,
    workers: int | None = None,
) -> TrainResult:
    """Meta-train ``spec`` on a meta-train dataset.

    When ``out_dir`` is given, JSON log lines go to ``out_dir/logs.jsonl`` and
    checkpoints to ``out_dir/checkpoints/`` (every ``checkpoint_every``
    iterations plus ``last.mfc`` at the end).
    """
    if dataset.role != META_TRAIN:
        raise DataError(f"train needs a meta-train dataset, got role {dataset.role!r}")
    dataset.validate_protocol(config.k, config.q)
    dtype = config.dtype
    if resume is not None:
        if resume.seed != schedule.seed:
            raise ConfigError(f"resume checkpoint seed {resume.seed} != schedule seed {schedule.seed}")
        params, opt_state, start = resume.params, resume.opt_state, resume.iteration
    else:
        params = init if init is not None else nn.init_params(spec, schedule.seed, dtype=dtype)
        params = params.detach()
        opt_state = AdamState.zeros(params) if config.optimizer == "adam" else None
        start = 0

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "logs.jsonl", "a" if resume is not None else "w")

    def checkpoint(p, st, iteration, name) -> Path | None:
        if out is None:
            return None
        path = out / "checkpoints" / name
        TrainCheckpoint(spec, p, st, iteration, schedule.seed, config.optimizer).save(path)
        return path

    records: list[TrainLogRecord] = []
    policy = augment_policy or AugmentPolicy.disabled()
    n_workers = thread_count(workers)
    pool = ThreadPoolExecutor(max_workers=n_workers) if n_workers > 1 else None
    try:
        for it in range(start, schedule.total_iterations):
            t0 = time.perf_counter()
            rng = np.random.default_rng([schedule.seed, it])
            episodes = [sample_episode(dataset, config.k, config.q, rng) for _ in range(config.tasks_per_batch)]
            if policy.enabled:
                episodes = [_augment_episode(ep, policy, rng, augment_query) for ep in episodes]
            use_da = it >= schedule.activation
            params = params.detach()
            jobs = [(spec, params, ep, config, use_da) for ep in episodes]
            alpha = lr_at(it, schedule, config.alpha)
            objective = "da" if use_da else "sum"
            try:
                results = list(pool.map(lambda a: _task_gradient(*a), jobs)) if pool else [_task_gradient(*a) for a in jobs]
                failure = None
            except NumericError as exc:
                results, failure = [], str(exc)

            task_losses = [r[0] for r in results]
            meta_loss = float("nan") if failure else 0.0
            for r in results:
                meta_loss += r[1]
            grad = {n: np.zeros_like(t.data) for n, t in params.items()}
            for _, _, g in results:
                for n in grad:
                    grad[n] = grad[n] + g[n]
            finite = failure is None and np.isfinite(meta_loss) and all(np.isfinite(g).all() for g in grad.values())
            if not finite:
                rec = TrainLogRecord(it, task_losses, meta_loss, alpha, _ms(t0), objective,
                                     error=failure or "non-finite meta loss or gradient")
                records.append(rec)
                if log_fh:
                    log_fh.write(rec.to_json() + "\n")
                checkpoint(params, opt_state, it, "last.mfc")
                raise NumericError(f"iteration {it}: {rec.error}; last good state kept")

            params, opt_state = meta_update(params, grad, alpha, opt_state, mode=config.optimizer)
            rec = TrainLogRecord(it, task_losses, meta_loss, alpha, _ms(t0), objective)
            records.append(rec)
            if log_fh:
                log_fh.write(rec.to_json() + "\n")
                log_fh.flush()
            if schedule.checkpoint_every and (it + 1) % schedule.checkpoint_every == 0:
                checkpoint(params, opt_state, it + 1, f"iter_{it + 1:06d}.mfc")
                checkpoint(params, opt_state, it + 1, "last.mfc")
            if on_iteration is not None:
                on_iteration(rec)
    finally:
        if pool is not None:
            pool.shutdown()
        if log_fh is not None:
            log_fh.close()

    final_iteration = max(start, schedule.total_iterations)
    path = checkpoint(params, opt_state, final_iteration, "last.mfc")
    return TrainResult(params, opt_state, final_iteration, records, path)


def _ms(t0: float) -> float:
    return round((time.perf_counter() - t0) * 1000.0, 3)


def _augment_episode(ep, policy: AugmentPolicy, rng, augment_query: bool):
    sx = augment_batch(ep.support_x, policy, rng)
    qx = augment_batch(ep.query_x, policy, rng) if augment_query else ep.query_x
    return replace(ep, support_x=sx, query_x=qx)


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]

