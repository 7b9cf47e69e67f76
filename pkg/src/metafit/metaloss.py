"""Task loss, inner-loop adaptation, the difficulty-aware meta loss and the meta update.

The difficulty-aware weighting of one task with query loss ``L`` is::

    L**eta * -log(max(eps, 1 - L))

It vanishes for well-learned tasks (small ``L``) and grows quickly for hard
ones.  With ``eta = 0`` it reduces to ``-log(max(eps, 1 - L))``.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .autodiff import Tensor, as_tensor, backward
from .errors import ConfigError, NumericError, UsageError
from .nn import ArchSpec, ParamSet

PROB_CLAMP = 1e-12

PRECISIONS = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class MetaConfig:
    """Hyperparameters of the inner and outer loops.

    ``gamma`` is the inner-loop (adaptation) learning rate and ``alpha`` the
    meta learning rate.  ``loss_reduction`` picks mean or sum over samples
    for the task cross-entropy.
    """

    eta: float = 5.0
    epsilon: float = 1e-6
    gamma: float = 0.3
    alpha: float = 0.001
    inner_steps: int = 5
    k: int = 5
    q: int = 15
    tasks_per_batch: int = 4
    second_order: bool = False
    loss_reduction: str = "mean"
    optimizer: str = "adam"
    precision: str = "float64"
    eval_inner_steps: int | None = None

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if not 0 < self.epsilon < 1:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.gamma < 0 or self.alpha < 0:
            raise ConfigError(f"learning rates must be >= 0 (gamma={self.gamma}, alpha={self.alpha})")
        for name in ("inner_steps", "k", "q", "tasks_per_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.eval_inner_steps is not None and self.eval_inner_steps < 0:
            raise ConfigError(f"eval_inner_steps must be >= 0, got {self.eval_inner_steps}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError(f"loss_reduction must be 'mean' or 'sum', got {self.loss_reduction!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {list(PRECISIONS)}, got {self.precision!r}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def test_steps(self) -> int:
        return self.inner_steps if self.eval_inner_steps is None else self.eval_inner_steps

    def to_dict(self) -> dict:
        return asdict(self)


def cross_entropy(probabilities, labels, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy of class-1 probabilities against {0, 1} labels."""
    p = as_tensor(probabilities)
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=p.dtype)
    if p.size != y.size:
        raise UsageError(f"cross_entropy: {p.size} probabilities vs {y.size} labels")
    if p.shape != y.shape:
        y = y.reshape(p.shape)
    # interior clamp to [PROB_CLAMP, 1 - PROB_CLAMP]; the upper clamp is written
    # as -max(-p, -hi) so unclamped values pass through bit-exactly
    p = -((-p.clamp_min(PROB_CLAMP)).clamp_min(-(1.0 - PROB_CLAMP)))
    yt = Tensor(y)
    per_sample = -(yt * p.log() + (1.0 - yt) * (1.0 - p).log())
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "sum":
        return per_sample.sum()
    raise UsageError(f"unknown reduction {reduction!r}")


def task_loss(spec: ArchSpec, params: Mapping, x, y, reduction: str = "mean") -> Tensor:
    return cross_entropy(nn.class1_probability(spec, params, x), y, reduction)


def inner_adapt(
    spec: ArchSpec,
    params: ParamSet,
    support_x,
    support_y,
    gamma: float,
    steps: int,
    second_order: bool = False,
    reduction: str = "mean",
) -> ParamSet:
    """``steps`` full-batch gradient-descent steps on the support set.

    With ``second_order`` the result stays on the graph of ``params`` so a
    later backward differentiates through the adaptation.  Otherwise the
    adapted parameters come back as fresh leaves.
    """
    if steps < 1:
        raise UsageError(f"inner_adapt: steps must be >= 1, got {steps}")
    current = params
    for step in range(steps):
        if not second_order:
            current = current.detach()
        loss = task_loss(spec, current, support_x, support_y, reduction)
        if not np.isfinite(loss.data).all():
            raise NumericError(f"inner_adapt: non-finite support loss at step {step}")
        grads = backward(loss, current, higher_order=second_order)
        current = ParamSet((n, current[n] - grads[n] * gamma) for n in current)
    return current if second_order else current.detach()


def _check_da_args(eta: float, epsilon: float) -> None:
    if eta < 0:
        raise UsageError(f"eta must be >= 0, got {eta}")
    if not 0 < epsilon < 1:
        raise UsageError(f"epsilon must lie in (0, 1), got {epsilon}")


def da_task_loss(loss, eta: float, epsilon: float) -> Tensor:
    """Difficulty-aware weighting of one task loss.

    The ``max(eps, 1 - L)`` clamp is a hard gate: past it the log factor is
    constant and only ``L**eta`` carries gradient.
    """
    _check_da_args(eta, epsilon)
    L = as_tensor(loss)
    if np.any(L.data < 0):
        raise UsageError(f"da_task_loss: task loss must be >= 0, got {L.data}")
    gate = (1.0 - L).clamp_min(epsilon)
    return (L ** eta) * (-gate.log())


def da_meta_loss(task_losses: Sequence, eta: float, epsilon: float) -> Tensor:
    """Sum of :func:`da_task_loss` over a batch of tasks, in order."""
    if len(task_losses) == 0:
        raise UsageError("da_meta_loss: empty task list")
    total = None
    for L in task_losses:
        term = da_task_loss(L, eta, epsilon)
        total = term if total is None else total + term
    return total


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: Mapping) -> "AdamState":
        return cls(
            m={n: np.zeros_like(_raw(t)) for n, t in params.items()},
            v={n: np.zeros_like(_raw(t)) for n, t in params.items()},
        )

    def copy(self) -> "AdamState":
        return AdamState(
            self.step,
            {n: a.copy() for n, a in self.m.items()},
            {n: a.copy() for n, a in self.v.items()},
            self.beta1,
            self.beta2,
            self.eps,
        )


def _raw(t):
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def meta_update(
    params: ParamSet,
    meta_gradient: Mapping,
    alpha: float,
    state: AdamState | None = None,
    mode: str = "adam",
) -> tuple[ParamSet, AdamState | None]:
    """One outer-loop step; returns the new parameters and optimizer state.

    ``mode="sgd"`` is the literal ``phi - alpha * grad`` update;
    ``mode="adam"`` applies the Adam rule with bias correction.
    """
    for name in params:
        if name not in meta_gradient:
            raise UsageError(f"meta_update: no gradient for parameter {name!r}")
    if mode == "sgd":
        new = {n: _raw(p) - alpha * _raw(meta_gradient[n]) for n, p in params.items()}
        return ParamSet.from_arrays(new), state
    if mode != "adam":
        raise UsageError(f"meta_update: unknown mode {mode!r}")
    st = (state or AdamState.zeros(params)).copy()
    st.step += 1
    c1 = 1.0 - st.beta1 ** st.step
    c2 = 1.0 - st.beta2 ** st.step
    new = {}
    for n, p in params.items():
        g = _raw(meta_gradient[n])
        if n not in st.m:
            st.m[n] = np.zeros_like(g)
            st.v[n] = np.zeros_like(g)
        st.m[n] = st.beta1 * st.m[n] + (1.0 - st.beta1) * g
        st.v[n] = st.beta2 * st.v[n] + (1.0 - st.beta2) * (g * g)
        step = (st.m[n] / c1) / (np.sqrt(st.v[n] / c2) + st.eps)
        new[n] = _raw(p) - alpha * step
    return ParamSet.from_arrays(new), st
