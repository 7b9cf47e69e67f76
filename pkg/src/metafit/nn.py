"""Model definitions: the 4-block conv classifier and a small MLP.

Parameters live in a :class:`ParamSet`, an ordered, immutable name -> Tensor
map.  Forward passes are pure functions of ``(spec, params, batch)`` so the
same code serves the inner adaptation loop, meta-updates and evaluation.
"""

from __future__ import annotations

import io
import json
import os
import struct
from collections.abc import Mapping
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError, UsageError

N_CLASSES = 2
CHECKPOINT_MAGIC = b"MFCKPT\x00\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    """Architecture description.

    ``arch`` is ``"conv4"`` (input shape ``(C, H, W)``, one width per conv
    block) or ``"mlp"`` (input shape ``(D,)``, one width per hidden layer).
    """

    arch: str = "conv4"
    input_shape: tuple[int, ...] = (3, 84, 84)
    widths: tuple[int, ...] = (64, 64, 64, 64)
    n_classes: int = N_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.arch not in ("conv4", "mlp"):
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.n_classes != N_CLASSES:
            raise ConfigError(f"output classes are fixed at {N_CLASSES}, got {self.n_classes}")
        if any(s <= 0 for s in self.input_shape) or any(w <= 0 for w in self.widths):
            raise ConfigError(f"zero-extent shape in {self}")
        if self.arch == "conv4":
            if len(self.input_shape) != 3:
                raise ConfigError(f"conv4 expects (C, H, W) input, got {self.input_shape}")
            if len(self.widths) != 4:
                raise ConfigError(f"conv4 has exactly 4 blocks, got widths {self.widths}")
            h, w = self.input_shape[1:]
            for _ in range(4):
                h, w = h // 2, w // 2
            if h == 0 or w == 0:
                raise ConfigError(f"input {self.input_shape} too small for 4 pooling stages")
        else:
            if len(self.input_shape) != 1:
                raise ConfigError(f"mlp expects (D,) input, got {self.input_shape}")
            if not self.widths:
                raise ConfigError("mlp needs at least one hidden layer")

    @classmethod
    def conv4(cls, input_shape=(3, 84, 84), width: int = 64) -> "ArchSpec":
        return cls("conv4", tuple(input_shape), (width,) * 4)

    @classmethod
    def mlp(cls, input_dim: int, hidden=(32, 32)) -> "ArchSpec":
        return cls("mlp", (int(input_dim),), tuple(hidden))

    def feature_size(self) -> int:
        if self.arch == "mlp":
            return self.widths[-1]
        _, h, w = self.input_shape
        for _ in range(4):
            h, w = h // 2, w // 2
        return self.widths[-1] * h * w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchSpec":
        return cls(d["arch"], tuple(d["input_shape"]), tuple(d["widths"]), d.get("n_classes", N_CLASSES))


class ParamSet(Mapping):
    """Ordered, immutable mapping of parameter name -> Tensor."""

    __slots__ = ("_items",)

    def __init__(self, items=()):
        entries = dict(items)
        for name, t in entries.items():
            if not isinstance(t, Tensor):
                raise UsageError(f"parameter {name!r} is not a Tensor")
        self._items = entries

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __repr__(self) -> str:
        body = ", ".join(f"{n}: {t.shape}" for n, t in self._items.items())
        return f"ParamSet({body})"

    @classmethod
    def from_arrays(cls, arrays: Mapping, requires_grad: bool = True) -> "ParamSet":
        return cls((n, Tensor(np.array(a), requires_grad=requires_grad)) for n, a in arrays.items())

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._items.items()}

    def detach(self, requires_grad: bool = True) -> "ParamSet":
        """Fresh leaves with the same values, cut from any graph."""
        return ParamSet((n, t.detach(requires_grad=requires_grad)) for n, t in self._items.items())

    def map(self, fn: Callable[[str, Tensor], Tensor]) -> "ParamSet":
        return ParamSet((n, fn(n, t)) for n, t in self._items.items())

    def combine(self, other: Mapping, fn: Callable[[Tensor, Tensor], Tensor]) -> "ParamSet":
        if list(other) != list(self._items):
            raise UsageError("parameter sets have different names")
        for n, t in self._items.items():
            if other[n].shape != t.shape:
                raise ShapeError(f"combine[{n}]", t.shape, other[n].shape)
        return ParamSet((n, fn(t, other[n])) for n, t in self._items.items())

    def count(self) -> int:
        return int(sum(t.size for t in self._items.values()))

    def equal(self, other: Mapping) -> bool:
        """Bit-for-bit equality of names, shapes and values."""
        if list(other) != list(self._items):
            return False
        return all(
            other[n].shape == t.shape and other[n].dtype == t.dtype and np.array_equal(other[n].data, t.data)
            for n, t in self._items.items()
        )


def param_shapes(spec: ArchSpec) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape table for ``spec``."""
    shapes: dict[str, tuple[int, ...]] = {}
    if spec.arch == "conv4":
        cin = spec.input_shape[0]
        for i, width in enumerate(spec.widths):
            shapes[f"block{i}.conv.weight"] = (width, cin, 3, 3)
            shapes[f"block{i}.conv.bias"] = (width,)
            shapes[f"block{i}.bn.scale"] = (width,)
            shapes[f"block{i}.bn.shift"] = (width,)
            cin = width
    else:
        fan_in = spec.input_shape[0]
        for i, width in enumerate(spec.widths):
            shapes[f"fc{i}.weight"] = (fan_in, width)
            shapes[f"fc{i}.bias"] = (width,)
            fan_in = width
    shapes["head.weight"] = (spec.feature_size(), spec.n_classes)
    shapes["head.bias"] = (spec.n_classes,)
    return shapes


def parameter_count(spec: ArchSpec) -> int:
    return int(sum(np.prod(s) for s in param_shapes(spec).values()))


def init_params(spec: ArchSpec, seed: int, dtype=np.float64) -> ParamSet:
    """Weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)); biases 0; bn scale 1, shift 0."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(spec).items():
        if any(s == 0 for s in shape):
            raise ConfigError(f"zero-extent parameter {name} {shape}")
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".bn.scale"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        out[name] = arr.astype(dtype)
    return ParamSet.from_arrays(out)


def zeros_like_params(spec: ArchSpec, dtype=np.float64) -> ParamSet:
    return ParamSet.from_arrays({n: np.zeros(s, dtype=dtype) for n, s in param_shapes(spec).items()})


def _check_batch(spec: ArchSpec, x: Tensor) -> None:
    if x.ndim != len(spec.input_shape) + 1 or x.shape[1:] != spec.input_shape:
        raise ShapeError("forward", x.shape, (None,) + spec.input_shape, detail=f"{spec.arch} input")


def features(spec: ArchSpec, params: Mapping, batch) -> Tensor:
    """Penultimate activations, shape (batch, feature_size)."""
    x = ad.as_tensor(batch, dtype=params["head.weight"].dtype)
    _check_batch(spec, x)
    if spec.arch == "conv4":
        for i in range(4):
            x = ad.conv2d(x, params[f"block{i}.conv.weight"], params[f"block{i}.conv.bias"])
            x = ad.batchnorm2d(x, params[f"block{i}.bn.scale"], params[f"block{i}.bn.shift"])
            x = ad.maxpool2d(x.relu())
        return x.reshape(x.shape[0], -1)
    for i in range(len(spec.widths)):
        x = (x @ params[f"fc{i}.weight"] + params[f"fc{i}.bias"]).relu()
    return x


def forward(spec: ArchSpec, params: Mapping, batch) -> Tensor:
    """Logits of shape (batch, 2)."""
    h = features(spec, params, batch)
    return h @ params["head.weight"] + params["head.bias"]


def class1_probability(spec: ArchSpec, params: Mapping, batch) -> Tensor:
    """Softmax probability of class 1; this is the model output used in the task loss."""
    return forward(spec, params, batch).softmax()[:, 1]


# checkpoint container
#
# layout: magic (8 bytes) | u32 format version | u64 header length |
#         JSON header (utf-8) | payload of raw little-endian tensors


def write_container(path, arch: ArchSpec, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Atomically write a self-describing tensor container."""
    table = []
    payload = io.BytesIO()
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        table.append(
            {"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": payload.tell(), "nbytes": len(raw)}
        )
        payload.write(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "arch": arch.to_dict(),
        "tensors": table,
        "meta": dict(meta or {}),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload.getvalue())
    os.replace(tmp, path)


def read_container(path) -> tuple[ArchSpec, dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a metafit checkpoint")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(blob[start:start + hlen].decode("utf-8"))
    base = start + hlen
    tensors = {}
    for entry in header["tensors"]:
        lo = base + entry["offset"]
        raw = blob[lo:lo + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise DataError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return ArchSpec.from_dict(header["arch"]), tensors, header["meta"]


def save_params(path, spec: ArchSpec, params: ParamSet, meta: Mapping | None = None) -> None:
    write_container(path, spec, params.arrays(), meta)


def load_params(path) -> tuple[ArchSpec, ParamSet]:
    spec, tensors, _ = read_container(path)
    expected = param_shapes(spec)
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise DataError(f"{path}: checkpoint lacks parameters {missing}")
    for n, s in expected.items():
        if tensors[n].shape != s:
            raise DataError(f"{path}: parameter {n} has shape {tensors[n].shape}, expected {s}")
    return spec, ParamSet.from_arrays({n: tensors[n] for n in expected})
