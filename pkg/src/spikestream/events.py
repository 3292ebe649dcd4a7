"""Event-driven kernels for binary inputs.

Each kernel walks the list of ones in its spike input and adds the matching
weight rows into an accumulator, so the work done is proportional to the
number of events.  The returned operation count is the number of scalar
additions actually scattered.
"""

from __future__ import annotations

import numpy as np

from .neurons import IntegrityError, is_binary


def event_linear(spikes: np.ndarray, weight: np.ndarray) -> tuple[np.ndarray, int]:
    """``spikes[..., C_in] @ weight[C_in, C_out]`` by accumulation only."""
    if not is_binary(spikes):
        raise IntegrityError("event_linear needs binary input")
    lead = spikes.shape[:-1]
    c_out = weight.shape[1]
    flat = spikes.reshape(-1, spikes.shape[-1])
    rows, chans = np.nonzero(flat)
    out = np.zeros((flat.shape[0], c_out), dtype=weight.dtype)
    r = np.repeat(rows, c_out)
    o = np.tile(np.arange(c_out), len(rows))
    vals = weight[np.repeat(chans, c_out), o]
    np.add.at(out, (r, o), vals)
    return out.reshape(lead + (c_out,)), int(r.size)


def event_conv1d(spikes: np.ndarray, weight: np.ndarray) -> tuple[np.ndarray, int]:
    """Same-padded conv over axis -2 of ``spikes[..., L, C_in]``.

    Every event scatters all K taps into a zero-padded accumulator which is
    cropped afterwards, so each event costs exactly ``K * C_out`` additions
    regardless of its distance from the sequence edges.
    """
    if not is_binary(spikes):
        raise IntegrityError("event_conv1d needs binary input")
    c_out, c_in, k = weight.shape
    pad = k // 2
    lead = spikes.shape[:-2]
    length = spikes.shape[-2]
    flat = spikes.reshape((-1, length, c_in))
    rows, pos, chans = np.nonzero(flat)
    acc = np.zeros((flat.shape[0], length + 2 * pad, c_out), dtype=weight.dtype)
    n = len(rows)
    taps = np.arange(k)
    outs = np.arange(c_out)
    # broadcast to [n, K, C_out]
    r = np.broadcast_to(rows[:, None, None], (n, k, c_out))
    dst = np.broadcast_to(pos[:, None, None] + 2 * pad - taps[None, :, None], (n, k, c_out))
    o = np.broadcast_to(outs[None, None, :], (n, k, c_out))
    vals = weight[o, chans[:, None, None], taps[None, :, None]]
    np.add.at(acc, (r.ravel(), dst.ravel(), o.ravel()), vals.ravel())
    out = acc[:, pad : pad + length, :]
    return out.reshape(lead + (length, c_out)), int(n * k * c_out)


def sdsa_accumulates(qk: np.ndarray) -> int:
    """Column-sum cost of an SDSA gate: one addition per one in ``q AND k``."""
    return int(np.count_nonzero(qk))
