"""Leaky integrate-and-fire layer with an arctangent surrogate gradient.

Forward is the hard Heaviside step (firing at equality).  Backward replaces
the step's derivative with that of

    smooth(u) = arctan(pi * alpha * u / 2) / pi + 1/2

Inside :func:`surrogate_forward` the forward pass uses ``smooth`` itself, so
the whole network becomes differentiable in the ordinary sense and can be
compared against finite differences.
"""

from __future__ import annotations

import csv
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, stack
from .tensor.autograd import make
from .tensor.serialize import atomic_write_bytes

_mode = threading.local()


class IntegrityError(RuntimeError):
    """A tensor that must be binary is not."""


@dataclass(frozen=True)
class LIFParams:
    tau: float = 2.0
    v_th: float = 1.0
    v_re: float = 0.0
    alpha: float = 2.0
    detach_reset: bool = True

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if not self.v_th > self.v_re:
            raise ValueError(f"v_th ({self.v_th}) must exceed v_re ({self.v_re})")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass
class LIFState:
    v: Tensor

    @classmethod
    def initial(cls, shape, params: LIFParams) -> "LIFState":
        return cls(Tensor(np.full(shape, params.v_re, dtype=np.float64)))


def smooth_mode() -> bool:
    return getattr(_mode, "smooth", False)


@contextmanager
def surrogate_forward():
    """Use the smooth surrogate in the forward pass (gradient checking only)."""
    prev = smooth_mode()
    _mode.smooth = True
    try:
        yield
    finally:
        _mode.smooth = prev


def surrogate(u, alpha: float = 2.0):
    return np.arctan(math.pi * alpha * np.asarray(u) / 2) / math.pi + 0.5


def surrogate_grad(u, alpha: float = 2.0):
    """Derivative of :func:`surrogate`: alpha / (2 (1 + (pi alpha u / 2)^2))."""
    z = math.pi * alpha * np.asarray(u, dtype=np.float64) / 2
    return alpha / (2 * (1 + z * z))


def heaviside(u) -> np.ndarray:
    return (np.asarray(u) >= 0).astype(np.float64)


def spike(u: Tensor, alpha: float = 2.0) -> Tensor:
    """Step nonlinearity with surrogate backward."""
    u = as_tensor(u)
    out = surrogate(u.data, alpha) if smooth_mode() else heaviside(u.data)
    return make(out, (u,), lambda g: (g * surrogate_grad(u.data, alpha),), "spike")


def is_binary(arr: np.ndarray) -> bool:
    return bool(np.all((arr == 0) | (arr == 1)))


def check_binary(arr: np.ndarray, what: str = "spike tensor") -> None:
    if not smooth_mode() and not is_binary(arr):
        bad = np.unique(arr[(arr != 0) & (arr != 1)])[:5]
        raise IntegrityError(f"{what} is not binary; offending values {bad.tolist()}")


def lif_step(x_t: Tensor, state: LIFState, params: LIFParams) -> tuple[Tensor, LIFState, Tensor]:
    """One charge / fire / reset update; returns (spikes, new state, charged membrane)."""
    x_t = as_tensor(x_t)
    v = state.v
    if x_t.shape != v.shape:
        raise DimensionError(f"lif_step input {x_t.shape} does not match state {v.shape}")
    h = v + (x_t - (v - params.v_re)) / params.tau
    s = spike(h - params.v_th, params.alpha)
    gate = s.detach() if params.detach_reset else s
    v_new = params.v_re * gate + h * (1.0 - gate)
    return s, LIFState(v_new), h


def sn_forward(x: Tensor, params: LIFParams, mask: np.ndarray | None = None) -> Tensor:
    """Run the LIF layer serially over axis 0 (spike time) from a fresh state.

    ``mask`` zeroes spikes at padded positions; it broadcasts against one
    time slice.
    """
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[0] < 1:
        raise DimensionError(f"sn_forward needs a leading time axis with T >= 1, got {x.shape}")
    state = LIFState.initial(x.shape[1:], params)
    outs = []
    for t in range(x.shape[0]):
        s, state, _ = lif_step(x[t], state, params)
        outs.append(s)
    out = stack(outs, axis=0)
    if mask is not None:
        out = out * mask
    check_binary(out.data, "SN output")
    return out


def firing_rate(s) -> float:
    arr = s.data if isinstance(s, Tensor) else np.asarray(s)
    if not is_binary(arr):
        raise IntegrityError("firing_rate called on a non-binary tensor")
    if arr.size == 0:
        return 0.0
    return float(np.count_nonzero(arr)) / arr.size


def to_events(s) -> np.ndarray:
    """Coordinates of ones, shape [n_events, ndim], lexicographically ordered."""
    arr = s.data if isinstance(s, Tensor) else np.asarray(s)
    if not is_binary(arr):
        raise IntegrityError("event view requested for a non-binary tensor")
    return np.argwhere(arr == 1)


def from_events(events: np.ndarray, shape) -> np.ndarray:
    dense = np.zeros(shape, dtype=np.float64)
    if len(events):
        dense[tuple(np.asarray(events, dtype=np.int64).T)] = 1.0
    return dense


RASTER_HEADER = ("t", "b", "l", "d")


def write_raster(s, path) -> int:
    """Write the ``t,b,l,d`` event CSV for a 4-axis spike tensor; returns the event count."""
    arr = s.data if isinstance(s, Tensor) else np.asarray(s)
    if arr.ndim != 4:
        raise DimensionError(f"raster export expects [T,B,L,D], got {arr.shape}")
    ev = to_events(arr)
    lines = [",".join(RASTER_HEADER)]
    lines.extend(f"{t},{b},{l},{d}" for t, b, l, d in ev)
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())
    return len(ev)


def read_raster(path, shape) -> np.ndarray:
    try:
        with open(Path(path), newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != RASTER_HEADER:
                raise ValueError(f"{path}: unexpected raster header {header}")
            events = np.array([[int(v) for v in row] for row in reader if row], dtype=np.int64)
    except OSError as exc:
        raise OSError(f"cannot read raster {path}: {exc}") from exc
    return from_events(events.reshape(-1, 4), shape)
