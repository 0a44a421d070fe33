"""Named parameter segments, reverse-mode gradients, finite-difference oracles.

A ParamVector is an ordered list of (name, float64 array) segments with a
flat view; flatten followed by from_flat is the identity. Gradients come
back ParamVector-shaped, and any segment the forward graph never touched
is an exact zeros array.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import NumericError
from .tensor import Tensor, backward, find_nonfinite, no_grad

LossFn = Callable[[Mapping[str, Tensor], object], Tensor]


class ParamVector:
    """Ordered, uniquely named float64 segments."""

    def __init__(self, segments: Iterable[tuple[str, np.ndarray]]):
        self._names: list[str] = []
        self._seg: dict[str, np.ndarray] = {}
        for name, arr in segments:
            if name in self._seg:
                raise ValueError(f"duplicate segment name {name!r}")
            self._names.append(name)
            self._seg[name] = np.ascontiguousarray(arr, dtype=np.float64)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._names)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._seg[name]

    def __contains__(self, name: str) -> bool:
        return name in self._seg

    def __len__(self) -> int:
        return len(self._names)

    def items(self):
        for name in self._names:
            yield name, self._seg[name]

    @property
    def size(self) -> int:
        return sum(a.size for a in self._seg.values())

    def copy(self) -> "ParamVector":
        return ParamVector((n, a.copy()) for n, a in self.items())

    def zeros_like(self) -> "ParamVector":
        return ParamVector((n, np.zeros_like(a)) for n, a in self.items())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for _, a in self.items()])

    def from_flat(self, flat: np.ndarray) -> "ParamVector":
        if flat.size != self.size:
            raise ValueError(f"flat vector has {flat.size} entries, expected {self.size}")
        out, lo = [], 0
        for name, a in self.items():
            hi = lo + a.size
            out.append((name, flat[lo:hi].reshape(a.shape)))
            lo = hi
        return ParamVector(out)

    def segment_slice(self, name: str) -> tuple[int, int]:
        """(start, stop) of a segment inside the flat view."""
        lo = 0
        for n in self._names:
            size = self._seg[n].size
            if n == name:
                return lo, lo + size
            lo += size
        raise KeyError(name)

    def add_scaled(self, other: "ParamVector", c: float) -> "ParamVector":
        """self + c * other, segmentwise."""
        return ParamVector((n, a + c * other[n]) for n, a in self.items())

    def restricted(self, names: Iterable[str]) -> "ParamVector":
        wanted = set(names)
        return ParamVector((n, a) for n, a in self.items() if n in wanted)

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for _, a in self.items())))


def as_leaves(params: ParamVector, requires_grad: bool = False) -> dict[str, Tensor]:
    return {n: Tensor(a, requires_grad=requires_grad) for n, a in params.items()}


def value_and_grad(loss_fn: LossFn, params: ParamVector, batch) -> tuple[float, ParamVector]:
    """Loss value and ParamVector-shaped reverse-mode gradients.

    Segments that never entered the forward graph come back as exact
    zeros (their leaves are never visited by the reverse pass).
    """
    leaves = as_leaves(params, requires_grad=True)
    loss = loss_fn(leaves, batch)
    if loss.size != 1:
        raise ValueError(f"loss_fn must return a scalar, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        op = find_nonfinite(loss) or "loss"
        raise NumericError(f"non-finite loss; first offending operation: {op}")
    backward(loss)
    grads = ParamVector(
        (n, leaves[n].grad if leaves[n].grad is not None else np.zeros_like(a))
        for n, a in params.items()
    )
    return float(loss.data), grads


def _loss_value(loss_fn: LossFn, params: ParamVector, batch) -> float:
    with no_grad():
        return float(loss_fn(as_leaves(params), batch).data)


def finite_diff_grad(
    loss_fn: LossFn, params: ParamVector, batch, step: float = 1e-5
) -> ParamVector:
    """Central-difference gradient, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    flat = params.flatten()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        lp = _loss_value(loss_fn, params.from_flat(flat), batch)
        flat[i] = orig - step
        lm = _loss_value(loss_fn, params.from_flat(flat), batch)
        flat[i] = orig
        grad[i] = (lp - lm) / (2.0 * step)
    return params.from_flat(grad)


def _flat_indices(params: ParamVector, names: Iterable[str]) -> np.ndarray:
    idx = []
    for name in names:
        lo, hi = params.segment_slice(name)
        idx.append(np.arange(lo, hi))
    return np.concatenate(idx)


def _cross_entry(
    loss_fn: LossFn, params: ParamVector, batch, i: int, j: int, step: float
) -> float:
    """Nested central difference for d^2 L / (d p_i d p_j).

    The four-point mixed stencil is also correct when i == j, where it
    reduces to the (2h) pure second-difference.
    """
    flat = params.flatten()

    def at(di: float, dj: float) -> float:
        f = flat.copy()
        f[i] += di
        f[j] += dj
        return _loss_value(loss_fn, params.from_flat(f), batch)

    return (at(step, step) - at(step, -step) - at(-step, step) + at(-step, -step)) / (
        4.0 * step * step
    )


def sampled_cross_hessian_max(
    loss_fn: LossFn,
    params: ParamVector,
    batch,
    names_a: Iterable[str],
    names_b: Iterable[str],
    step: float = 1e-3,
    probes: int = 64,
    seed: int = 0,
) -> float:
    """Max |second cross-partial| over randomly sampled coordinate pairs.

    When both name sets coincide, half the draws are forced onto the
    diagonal (i == j) so the probe sees pure second derivatives too.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    idx_a = _flat_indices(params, names_a)
    idx_b = _flat_indices(params, names_b)
    same_block = set(names_a) == set(names_b)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(probes):
        i = int(rng.choice(idx_a))
        j = i if (same_block and k % 2 == 0) else int(rng.choice(idx_b))
        worst = max(worst, abs(_cross_entry(loss_fn, params, batch, i, j, step)))
    return worst


def finite_diff_hessian_block(
    loss_fn: LossFn,
    params: ParamVector,
    batch,
    block_a: Iterable[str],
    block_b: Iterable[str],
    step: float = 1e-3,
    probes: int = 64,
    seed: int = 0,
) -> float:
    """Sampled max |d^2 L / da db| between two disjoint segment-name blocks."""
    set_a, set_b = set(block_a), set(block_b)
    overlap = set_a & set_b
    if overlap:
        raise ValueError(f"blocks overlap on segments {sorted(overlap)}")
    return sampled_cross_hessian_max(
        loss_fn, params, batch, set_a, set_b, step=step, probes=probes, seed=seed
    )


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise.

    The floor keeps finite-difference rounding noise on near-zero
    coordinates from dominating the ratio; any absolute disagreement
    above floor * tolerance still registers.
    """
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def grads_max_relative_error(a: ParamVector, b: ParamVector, floor: float = 1e-4) -> float:
    return max_relative_error(a.flatten(), b.flatten(), floor=floor)
