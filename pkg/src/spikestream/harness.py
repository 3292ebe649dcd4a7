"""Synthetic data, training, synthesis, evaluation and exports."""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import instrument
from .model import EmptyOutputError, ModelConfig, PhonemeBatch, SpikingTTS, VocabularyError, durations_from_log, loss
from .neurons import check_binary, firing_rate, write_raster
from .optim import Adam, clip_grad_norm
from .tensor import ConfigurationError, no_grad, serialize

PAD = 0
CONTAINER_MAGIC = b"SPKD"
CONTAINER_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


# dataset


@dataclass
class Item:
    tokens: np.ndarray
    durations: np.ndarray
    pitch: np.ndarray
    energy: np.ndarray
    mel: np.ndarray

    @property
    def frames(self) -> int:
        return int(self.mel.shape[0])


@dataclass
class SyntheticDataset:
    seed: int
    vocab_size: int
    n_mel: int
    L_range: tuple
    templates: np.ndarray  # [vocab, n_mel]; row PAD unused
    token_durations: np.ndarray  # [vocab]
    token_pitch: np.ndarray
    token_energy: np.ndarray
    items: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def template_block(self, token: int) -> np.ndarray:
        return np.repeat(self.templates[token][None, :], int(self.token_durations[token]), axis=0)

    def params(self) -> dict:
        return {
            "seed": self.seed,
            "n_items": len(self.items),
            "vocab_size": self.vocab_size,
            "n_mel": self.n_mel,
            "L_range": list(self.L_range),
        }

    def save(self, path) -> None:
        tensors = {
            "templates": self.templates,
            "token_durations": self.token_durations,
            "token_pitch": self.token_pitch,
            "token_energy": self.token_energy,
        }
        for i, it in enumerate(self.items):
            for key in ("tokens", "durations", "pitch", "energy", "mel"):
                tensors[f"items/{i}/{key}"] = getattr(it, key)
        blobs, index, offset = [], {}, 0
        for name, arr in tensors.items():
            data = serialize.encode(arr)
            index[name] = [offset, len(data)]
            blobs.append(data)
            offset += len(data)
        head = json.dumps({"meta": self.params(), "tensors": index}, sort_keys=True).encode()
        payload = CONTAINER_MAGIC + struct.pack("<IQ", CONTAINER_VERSION, len(head)) + head + b"".join(blobs)
        try:
            serialize.atomic_write_bytes(path, payload)
        except OSError as exc:
            raise OSError(f"cannot write dataset {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "SyntheticDataset":
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise OSError(f"cannot read dataset {path}: {exc}") from exc
        if raw[:4] != CONTAINER_MAGIC:
            raise serialize.FormatError(f"{path}: not a dataset container")
        version, hlen = struct.unpack_from("<IQ", raw, 4)
        if version != CONTAINER_VERSION:
            raise serialize.FormatError(f"{path}: unsupported container version {version}")
        start = 16
        head = json.loads(raw[start : start + hlen])
        base = start + hlen
        view = memoryview(raw)

        def get(name):
            off, _ = head["tensors"][name]
            arr, _ = serialize.decode(view, base + off)
            return arr

        meta = head["meta"]
        items = [
            Item(*(get(f"items/{i}/{k}") for k in ("tokens", "durations", "pitch", "energy", "mel")))
            for i in range(meta["n_items"])
        ]
        return cls(
            meta["seed"],
            meta["vocab_size"],
            meta["n_mel"],
            tuple(meta["L_range"]),
            get("templates"),
            get("token_durations"),
            get("token_pitch"),
            get("token_energy"),
            items,
        )


def texture(seed: int, index: int, frames: int, n_mel: int, amplitude: float = 0.03) -> np.ndarray:
    """Low-amplitude deterministic ripple added on top of the template blocks."""
    phase = ((seed * 7919 + index * 104729) % 1000) / 1000.0 * 2 * math.pi
    f = np.arange(frames)[:, None]
    m = np.arange(n_mel)[None, :]
    return amplitude * np.sin(0.9 * f + 0.55 * m + phase)


def gen_synthetic(seed: int, n_items: int, vocab_size: int = 16, L_range=(4, 8), n_mel: int = 20, L_max: int = 256) -> SyntheticDataset:
    """Token-template dataset: each token owns a mel bump, a duration and pitch/energy values.

    Token 0 is padding and never appears in an item.
    """
    lo, hi = L_range
    if vocab_size < 2:
        raise ConfigurationError(f"vocab_size must be >= 2, got {vocab_size}")
    if not (2 <= lo <= hi <= L_max):
        raise ConfigurationError(f"L_range must satisfy 2 <= lo <= hi <= {L_max}, got {L_range}")
    if n_items < 1 or n_mel < 2:
        raise ConfigurationError(f"need n_items >= 1 and n_mel >= 2, got {n_items}, {n_mel}")
    rng = np.random.default_rng(seed)
    n_tok = vocab_size - 1
    centers = np.zeros(vocab_size)
    centers[1:] = rng.permutation(np.linspace(0.5, n_mel - 1.5, n_tok))
    width = max(n_mel / 12.0, 0.8)
    bins = np.arange(n_mel)[None, :]
    templates = np.exp(-0.5 * ((bins - centers[:, None]) / width) ** 2)
    templates[PAD] = 0.0
    token_durations = np.zeros(vocab_size, dtype=np.int64)
    token_durations[1:] = rng.integers(1, 5, size=n_tok)
    token_pitch = np.zeros(vocab_size)
    token_pitch[1:] = rng.uniform(-1, 1, size=n_tok)
    token_energy = np.zeros(vocab_size)
    token_energy[1:] = rng.uniform(-1, 1, size=n_tok)

    ds = SyntheticDataset(seed, vocab_size, n_mel, (lo, hi), templates, token_durations, token_pitch, token_energy)
    for i in range(n_items):
        length = int(rng.integers(lo, hi + 1))
        tokens = rng.integers(1, vocab_size, size=length).astype(np.int64)
        durations = token_durations[tokens]
        mel = np.concatenate([ds.template_block(t) for t in tokens], axis=0)
        mel = mel + texture(seed, i, mel.shape[0], n_mel)
        ds.items.append(Item(tokens, durations.copy(), token_pitch[tokens], token_energy[tokens], mel))
    return ds


def collate(items: list) -> PhonemeBatch:
    b = len(items)
    length = max(len(it.tokens) for it in items)
    frames = max(it.frames for it in items)
    n_mel = items[0].mel.shape[1]
    tokens = np.full((b, length), PAD, dtype=np.int64)
    durations = np.zeros((b, length), dtype=np.int64)
    pitch = np.zeros((b, length))
    energy = np.zeros((b, length))
    mel = np.zeros((b, frames, n_mel))
    for i, it in enumerate(items):
        n = len(it.tokens)
        tokens[i, :n] = it.tokens
        durations[i, :n] = it.durations
        pitch[i, :n] = it.pitch
        energy[i, :n] = it.energy
        mel[i, : it.frames] = it.mel
    return PhonemeBatch(
        tokens,
        np.array([len(it.tokens) for it in items], dtype=np.int64),
        durations,
        pitch,
        energy,
        mel,
        np.array([it.frames for it in items], dtype=np.int64),
    )


# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict
    step: int = 0
    loss_history: list = field(default_factory=list)
    run: dict = field(default_factory=dict)  # effective run configuration, echoed in the manifest

    def model(self) -> SpikingTTS:
        m = SpikingTTS(self.config)
        m.load_state_dict(self.state)
        return m

    @classmethod
    def from_model(cls, model: SpikingTTS, step: int = 0, loss_history=None) -> "Checkpoint":
        return cls(model.cfg, model.state_dict(), step, list(loss_history or []))

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "run": self.run,
            "step": self.step,
            "loss_history": self.loss_history,
            "tensors": sorted(self.state),
        }

    def save(self, out_dir, extra_files: dict | None = None) -> Path:
        """Write tensors and manifest into a temp dir, then swap it into place."""
        out_dir = Path(out_dir)
        out_dir.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(dir=out_dir.parent, prefix=f".{out_dir.name}."))
        try:
            for name, arr in self.state.items():
                serialize.save(tmp / f"{name}.spkt", arr)
            (tmp / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
            for fname, content in (extra_files or {}).items():
                if isinstance(content, bytes):
                    (tmp / fname).write_bytes(content)
                else:
                    (tmp / fname).write_text(content)
            if out_dir.exists():
                shutil.rmtree(out_dir)
            os.replace(tmp, out_dir)
        except OSError as exc:
            shutil.rmtree(tmp, ignore_errors=True)
            raise OSError(f"cannot write checkpoint {out_dir}: {exc}") from exc
        return out_dir

    @classmethod
    def load(cls, ckpt_dir) -> "Checkpoint":
        ckpt_dir = Path(ckpt_dir)
        try:
            man = json.loads((ckpt_dir / "manifest.json").read_text())
        except OSError as exc:
            raise OSError(f"cannot read checkpoint manifest in {ckpt_dir}: {exc}") from exc
        state = {name: serialize.load(ckpt_dir / f"{name}.spkt") for name in man["tensors"]}
        return cls(ModelConfig.from_dict(man["config"]), state, man["step"], man["loss_history"], man.get("run", {}))


def checkpoint_digest(ckpt_dir) -> str:
    """SHA-256 over the manifest and every tensor file, in name order."""
    ckpt_dir = Path(ckpt_dir)
    man = json.loads((ckpt_dir / "manifest.json").read_text())
    h = hashlib.sha256((ckpt_dir / "manifest.json").read_bytes())
    for name in man["tensors"]:
        h.update(name.encode())
        h.update((ckpt_dir / f"{name}.spkt").read_bytes())
    return h.hexdigest()


# training


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    total: list = field(default_factory=list)
    components: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    firing_rates: dict = field(default_factory=dict)  # step -> {site: rate}

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "total": self.total,
            "components": self.components,
            "grad_norm": self.grad_norm,
            "wall_clock": self.wall_clock,
            "firing_rates": {str(k): v for k, v in self.firing_rates.items()},
        }


def batch_schedule(n_items: int, batch_size: int, steps: int, seed: int):
    """Yield index lists, reshuffling every epoch with a seeded generator."""
    rng = np.random.default_rng(seed)
    order: list[int] = []
    for _ in range(steps):
        if len(order) < min(batch_size, n_items):
            order = order + rng.permutation(n_items).tolist()
        picked, order = order[:batch_size], order[batch_size:]
        yield picked


def train(
    config: ModelConfig,
    dataset: SyntheticDataset,
    steps: int | None = None,
    seed: int | None = None,
    snapshot_every: int = 100,
    log_every: int = 0,
    callback=None,
) -> tuple[Checkpoint, TrainLog]:
    """Teacher-forced Adam training; deterministic given (config, dataset, seed)."""
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    steps = config.steps if steps is None else steps
    seed = config.seed if seed is None else seed
    model = SpikingTTS(config, seed=seed)
    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    log = TrainLog()
    last_finite = None
    start = time.perf_counter()
    for step, idx in enumerate(batch_schedule(len(dataset), config.batch_size, steps, seed + 1), start=1):
        batch = collate([dataset.items[i] for i in idx])
        snap = snapshot_every and (step == 1 or step % snapshot_every == 0)
        sess = instrument.Session(count_ops=False) if snap else None
        opt.zero_grad()
        if sess is not None:
            with sess:
                out = model.forward(batch, training=True)
        else:
            out = model.forward(batch, training=True)
        if not np.array_equal(out.mel_lengths, batch.mel_lengths):
            raise AssertionError("teacher-forced length regulation lost frames")
        lb = loss(out, batch, config)
        value = lb.total.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {step}; last finite loss {last_finite}")
        last_finite = value
        lb.total.backward()
        gn = clip_grad_norm(params, config.clip)
        opt.step()
        log.steps.append(step)
        log.total.append(value)
        log.components.append(lb.components)
        log.grad_norm.append(gn)
        log.wall_clock.append(time.perf_counter() - start)
        if sess is not None:
            log.firing_rates[step] = {k: v.rate for k, v in sess.sites.items()}
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  loss {value:.4f}  " + "  ".join(f"{k} {v:.3f}" for k, v in lb.components.items()), flush=True)
        if callback is not None:
            callback(step, model, value)
    return Checkpoint.from_model(model, steps, log.total), log


# inference and evaluation


def synthesize(checkpoint: Checkpoint | SpikingTTS, tokens) -> tuple[np.ndarray, dict]:
    """Predicted-duration forward for one utterance; returns (mel [L', n_mel], spike captures)."""
    mel, rasters, _ = _infer(checkpoint, tokens)
    return mel, rasters


def _infer(checkpoint, tokens):
    model = checkpoint.model() if isinstance(checkpoint, Checkpoint) else checkpoint
    batch = PhonemeBatch.from_tokens(tokens)
    if batch.tokens.size and batch.tokens.min() < 1:
        raise VocabularyError("token 0 is reserved for padding; utterance ids start at 1")
    with no_grad(), instrument.Session(count_ops=False, capture=True) as sess:
        out = model.forward(batch, training=False, teacher_forcing=False)
    n = int(out.mel_lengths[0])
    return out.o_fine.data[0, :n].copy(), dict(sess.spikes), out


def mel_mae(pred: np.ndarray, target: np.ndarray, lengths) -> float:
    """Masked mean absolute error over valid frames of ``[B, L', n_mel]`` arrays."""
    pred, target = np.asarray(pred), np.asarray(target)
    mask = (np.arange(target.shape[1])[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)[:, :, None]
    return float((np.abs(pred - target) * mask).sum() / max(mask.sum() * target.shape[2], 1.0))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float((a * a).sum() * (b * b).sum()))
    return float((a * b).sum() / denom) if denom > 0 else 0.0


def template_correlation(checkpoint, dataset: SyntheticDataset, items=None) -> float:
    """Mean Pearson r between each synthesized token block and its template row.

    Tokens given zero predicted frames score 0, as do all tokens of an
    utterance whose predicted length collapses to nothing.
    """
    model = checkpoint.model() if isinstance(checkpoint, Checkpoint) else checkpoint
    scores = []
    for it in items if items is not None else dataset.items:
        try:
            mel, _, out = _infer(model, it.tokens)
        except EmptyOutputError:
            scores.extend([0.0] * len(it.tokens))
            continue
        pos = 0
        for tok, d in zip(it.tokens, out.durations[0]):
            d = int(d)
            if d == 0:
                scores.append(0.0)
                continue
            block = mel[pos : pos + d].mean(axis=0)
            scores.append(pearson(block, dataset.templates[tok]))
            pos += d
    return float(np.mean(scores)) if scores else 0.0


def evaluate(checkpoint, dataset: SyntheticDataset, batch_size: int = 8) -> dict:
    """Teacher-forced metrics averaged over items."""
    model = checkpoint.model() if isinstance(checkpoint, Checkpoint) else checkpoint
    coarse, fine, hits, total = [], [], 0, 0
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            items = dataset.items[start : start + batch_size]
            batch = collate(items)
            out = model.forward(batch, training=False)
            for i, it in enumerate(items):
                n = it.frames
                coarse.append(mel_mae(out.o_coarse.data[i : i + 1, :n], it.mel[None], [n]))
                fine.append(mel_mae(out.o_fine.data[i : i + 1, :n], it.mel[None], [n]))
                pred = durations_from_log(out.d_hat.data[i, : len(it.tokens)])
                hits += int((pred == it.durations).sum())
                total += len(it.tokens)
    return {
        "mae_coarse": float(np.mean(coarse)),
        "mae_fine": float(np.mean(fine)),
        "duration_accuracy": hits / max(total, 1),
        "items": len(dataset),
    }


# exports


def export_raster(spikes, path) -> int:
    arr = np.asarray(spikes)
    check_binary(arr, "raster export")
    return write_raster(arr, path)


def export_mel(mel, path, csv_path=None) -> None:
    mel = np.asarray(mel, dtype=np.float64)
    if not np.all(np.isfinite(mel)):
        raise ValueError(f"refusing to export a non-finite mel to {path}")
    serialize.save(path, mel)
    if csv_path is not None:
        lines = [",".join(repr(float(v)) for v in row) for row in mel]
        serialize.atomic_write_bytes(csv_path, ("\n".join(lines) + "\n").encode())


def import_mel(path) -> np.ndarray:
    return serialize.load(path)


def import_mel_csv(path) -> np.ndarray:
    rows = [line for line in Path(path).read_text().splitlines() if line]
    return np.array([[float(v) for v in r.split(",")] for r in rows])


def raster_event_count(spikes) -> int:
    arr = np.asarray(spikes)
    return int(round(firing_rate(arr) * arr.size))
