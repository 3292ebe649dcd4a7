"""Per-run recording of spike sites and weight layers.

Model code calls the module-level hooks unconditionally; they are no-ops
unless a :class:`Session` is active on the current thread.  A session
collects firing-rate counts per spike site and, for every weight layer,
the input spike statistics plus the number of accumulate operations the
event-driven kernels in :mod:`spikestream.events` perform.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .neurons import IntegrityError, is_binary, smooth_mode

_local = threading.local()


@dataclass
class SiteStats:
    ones: int = 0
    size: int = 0

    @property
    def rate(self) -> float:
        return self.ones / self.size if self.size else 0.0


@dataclass
class LayerRecord:
    name: str
    kind: str
    timesteps: int
    positions: int  # valid sequence positions, summed over the batch
    dims: dict
    ones: int = 0
    size: int = 0
    ac_ops: int = 0
    # ANN-twin attention terms need per-sequence lengths
    seq_lengths: list = field(default_factory=list)

    @property
    def rate(self) -> float:
        return self.ones / self.size if self.size else 0.0


class Session:
    """Collects statistics for one profiling run; never share across threads."""

    def __init__(self, count_ops: bool = True, verify: bool = False, capture: bool = False):
        self.count_ops = count_ops
        self.verify = verify
        self.capture = capture
        self.sites: dict[str, SiteStats] = {}
        self.layers: dict[str, LayerRecord] = {}
        self.spikes: dict[str, np.ndarray] = {}

    def __enter__(self) -> "Session":
        self._prev = getattr(_local, "session", None)
        _local.session = self
        return self

    def __exit__(self, *exc) -> None:
        _local.session = self._prev


def active() -> Session | None:
    return getattr(_local, "session", None)


def _valid_count(arr: np.ndarray, mask: np.ndarray | None) -> int:
    if mask is None:
        return arr.size
    m = np.broadcast_to(mask, arr.shape[:-1] + (1,))
    return int(m.sum()) * arr.shape[-1]


def record_site(name: str, spikes: np.ndarray, mask: np.ndarray | None = None) -> None:
    sess = active()
    if sess is None:
        return
    st = sess.sites.setdefault(name, SiteStats())
    st.ones += int(np.count_nonzero(spikes))
    st.size += _valid_count(spikes, mask)
    if sess.capture:
        sess.spikes[name] = spikes.copy()


def record_weight_layer(
    name: str,
    kind: str,
    spikes: np.ndarray,
    weight: np.ndarray,
    dense_out: np.ndarray | None = None,
    mask: np.ndarray | None = None,
    seq_lengths=None,
) -> None:
    """Register a projection / linear / conv fed by ``spikes`` ([T, B, L, C_in]).

    ``weight`` is [C_in, C_out] for linear kinds and [C_out, C_in, K] for
    convolutions.  ``dense_out`` (pre-bias) enables the event-path
    cross-check when the session was opened with ``verify=True``.
    """
    sess = active()
    if sess is None:
        return
    if not smooth_mode() and not is_binary(spikes):
        raise IntegrityError(f"weight layer {name} received a non-binary input")
    from . import events

    t = spikes.shape[0]
    positions = _valid_count(spikes, mask) // (t * spikes.shape[-1])
    if kind == "conv":
        c_out, c_in, k = weight.shape
        dims = {"c_in": c_in, "c_out": c_out, "k": k}
    elif kind == "qkv":
        c_in, c_out = weight.shape[-2], weight.shape[-1]
        dims = {"d": c_in, "count": weight.shape[0] if weight.ndim == 3 else 1}
    else:
        c_in, c_out = weight.shape
        dims = {"d_in": c_in, "d_out": c_out}
    rec = sess.layers.get(name)
    if rec is None:
        rec = sess.layers[name] = LayerRecord(name, kind, t, 0, dims)
    rec.positions += positions
    rec.ones += int(np.count_nonzero(spikes))
    rec.size += _valid_count(spikes, mask)
    if seq_lengths is not None:
        rec.seq_lengths.extend(int(n) for n in seq_lengths)
    if not sess.count_ops:
        return
    if kind == "conv":
        out, ops = events.event_conv1d(spikes, weight)
    elif kind == "qkv":
        ops = 0
        out = []
        for w in weight:
            o, n = events.event_linear(spikes, w)
            out.append(o)
            ops += n
        out = np.stack(out)
    else:
        out, ops = events.event_linear(spikes, weight)
    rec.ac_ops += ops
    if sess.verify and dense_out is not None:
        np.testing.assert_allclose(out, dense_out, rtol=1e-9, atol=1e-9, err_msg=f"event path mismatch in {name}")


def record_attention_core(name: str, qk: np.ndarray, mix_axis: int, mask: np.ndarray | None = None) -> int:
    """Register an SDSA gate; ``qk`` is the AND of the query and key spikes.

    Each one in ``qk`` adds one into its column sum along ``mix_axis``;
    the gate itself is masking and costs no accumulates.
    """
    ops = int(np.count_nonzero(qk))
    sess = active()
    if sess is None:
        return ops
    t = qk.shape[0]
    rec = sess.layers.get(name)
    if rec is None:
        rec = sess.layers[name] = LayerRecord(name, "attention-core", t, 0, {"d": qk.shape[-1], "mix_axis": mix_axis})
    rec.positions += _valid_count(qk, mask) // (t * qk.shape[-1])
    rec.ones += ops
    rec.size += _valid_count(qk, mask)
    rec.ac_ops += ops
    return ops
