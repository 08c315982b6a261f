"""Dense numeric core: parameter store, Adam, warmup schedule, checkpoints.

Everything runs in float64 on numpy. Gradients come from explicit backward
functions (see :mod:`scdk.layers`); this module owns the mutable training
state and the generic finite-difference gradient checker used to validate
every backward in the test suite.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

CHECKPOINT_MAGIC = b"SCDK1\n"


class NonFiniteError(ValueError):
    """A tensor that must be finite contains NaN or +/-inf."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or truncated."""


def named_rng(seed: int, *names: str) -> np.random.Generator:
    """Derive an independent generator from a root seed and a stream name.

    All randomness in the toolkit flows through this helper so that a single
    config seed reproduces every sub-stream (data, init, batch order) exactly.
    """
    words = [int(seed) % (2**32)] + [zlib.crc32(n.encode("utf-8")) for n in names]
    return np.random.default_rng(np.random.SeedSequence(words))


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    warmup_steps: int = 25
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    label_smoothing: float = 0.01
    total_steps: int = 400
    batch_size: int = 8
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ValueError(f"label_smoothing must be in [0,1), got {self.label_smoothing}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


class ParamStore:
    """Named float64 tensors with gradient buffers, frozen flags and Adam state.

    Single-writer: one optimizer loop mutates values; forwards only read them.
    Gradient accumulation adds into per-parameter buffers, so batch items may
    be processed in any fixed order and summed deterministically.
    """

    def __init__(self) -> None:
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._frozen: dict[str, bool] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray, frozen: bool = False) -> np.ndarray:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        arr = np.asarray(value, dtype=np.float64)
        self._params[name] = arr
        self._grads[name] = np.zeros_like(arr)
        self._frozen[name] = frozen
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def accumulate(self, name: str, delta: np.ndarray) -> None:
        g = self._grads[name]
        if delta.shape != g.shape:
            raise ValueError(
                f"gradient shape {delta.shape} != parameter shape {g.shape} for {name!r}"
            )
        g += delta

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def set_frozen(self, name: str, frozen: bool) -> None:
        self._frozen[name] = frozen

    def freeze_all(self) -> None:
        for name in self._frozen:
            self._frozen[name] = True

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def set_value(self, name: str, value: np.ndarray) -> None:
        cur = self._params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != cur.shape:
            raise ValueError(
                f"value shape {value.shape} != parameter shape {cur.shape} for {name!r}"
            )
        cur[...] = value


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log softmax with max subtraction; rejects non-finite input."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        return log_softmax(logits[None, :])[0]
    bad = ~np.isfinite(logits)
    if bad.any():
        row = int(np.nonzero(bad.any(axis=-1))[0][0])
        raise NonFiniteError(f"non-finite logits in row {row}")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax_backward(log_probs: np.ndarray, dlog_probs: np.ndarray) -> np.ndarray:
    """Gradient wrt logits given gradient wrt the log_softmax output."""
    s = dlog_probs.sum(axis=-1, keepdims=True)
    return dlog_probs - np.exp(log_probs) * s


def warmup_lr(step: int, cfg: TrainConfig) -> float:
    """Linear ramp to ``base_lr`` over warmup, then inverse-square-root decay."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    w = cfg.warmup_steps
    return cfg.base_lr * min(step / w, math.sqrt(w / step))


def clip_grad_norm(store: ParamStore, clip_norm: float) -> float:
    """Scale unfrozen gradients to a global L2 norm of at most ``clip_norm``.

    Returns the pre-clip global norm. Frozen parameters are ignored entirely.
    """
    total = 0.0
    for name in store.names():
        if store.is_frozen(name):
            continue
        g = store.grad(name)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm > clip_norm:
        scale = clip_norm / norm
        for name in store.names():
            if not store.is_frozen(name):
                store.grad(name)[...] *= scale
    return norm


def adam_step(store: ParamStore, lr: float, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update on every unfrozen parameter.

    Frozen parameters and their moments are untouched; all gradient buffers
    are zeroed afterwards.
    """
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name in store.names():
        if store.is_frozen(name):
            continue
        g = store.grad(name)
        m = store._m[name]
        v = store._v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        store[name][...] -= lr * update
    store.zero_grads()


def finite_diff_check(
    loss_fn: Callable[[ParamStore], float],
    store: ParamStore,
    eps: float = 1e-5,
    max_coords_per_param: int = 8,
    rng_seed: int = 0,
) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must be deterministic and, as a side effect, accumulate the
    analytic gradient of its return value into the store's gradient buffers.
    A seeded subset of coordinates per parameter is perturbed; returns the
    maximum relative error |a-n| / max(|a|, |n|, 1e-8).
    """
    rng = named_rng(rng_seed, "finite_diff")
    store.zero_grads()
    loss_fn(store)
    analytic = {name: store.grad(name).copy() for name in store.names()}

    worst = 0.0
    for name in store.names():
        if store.is_frozen(name):
            continue
        param = store[name]
        flat = param.reshape(-1)
        n = flat.size
        if n <= max_coords_per_param:
            coords: Iterable[int] = range(n)
        else:
            coords = sorted(rng.choice(n, size=max_coords_per_param, replace=False))
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            store.zero_grads()
            lp = loss_fn(store)
            flat[idx] = orig - eps
            store.zero_grads()
            lm = loss_fn(store)
            flat[idx] = orig
            numeric = (lp - lm) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    store.zero_grads()
    return worst


def save_checkpoint(store: ParamStore, path: str) -> None:
    """Write parameters as a flat binary container, names in lexicographic order."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name in store.names():
            arr = store[name]
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read a checkpoint back into a name -> tensor dict."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint header {magic!r}")
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                return tensors
            if len(head) < 4:
                raise CheckpointError(f"{path}: truncated record header")
            (name_len,) = struct.unpack("<I", head)
            name_bytes = f.read(name_len)
            if len(name_bytes) < name_len:
                raise CheckpointError(f"{path}: truncated name")
            name = name_bytes.decode("utf-8")
            rank_bytes = f.read(4)
            if len(rank_bytes) < 4:
                raise CheckpointError(f"{path}: truncated rank for {name!r}")
            (rank,) = struct.unpack("<I", rank_bytes)
            dims = []
            for _ in range(rank):
                dim_bytes = f.read(4)
                if len(dim_bytes) < 4:
                    raise CheckpointError(f"{path}: truncated dims for {name!r}")
                dims.append(struct.unpack("<I", dim_bytes)[0])
            count = int(np.prod(dims)) if dims else 1
            payload = f.read(8 * count)
            if len(payload) < 8 * count:
                raise CheckpointError(f"{path}: truncated values for {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()


def load_into_store(store: ParamStore, path: str) -> None:
    """Load checkpoint values into an already-built store; shapes must match."""
    tensors = load_checkpoint(path)
    missing = set(store.names()) - set(tensors)
    extra = set(tensors) - set(store.names())
    if missing or extra:
        raise CheckpointError(
            f"{path}: parameter names do not match model "
            f"(missing={sorted(missing)}, unexpected={sorted(extra)})"
        )
    for name, value in tensors.items():
        store.set_value(name, value)
