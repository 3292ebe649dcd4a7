"""Accumulate-vs-MAC energy model and firing-rate reports.

Spiking layers cost ``T * R * E_add * FLOPs`` where R is the firing rate of
the spike tensor entering the layer; the ANN twin of the same topology
costs ``E_mac * FLOPs``, plus per attention block ``E_mac * N * D^2`` for the
core, ``E_mac * 2 N^2`` for softmax and ``E_mac * N^2`` for scaling.
Normalisation layers and embeddings are left out of both sides.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import instrument
from .model import PhonemeBatch, SpikingTTS
from .tensor import ConfigurationError, ContractError, no_grad

KINDS = ("qkv", "projection", "attention-core", "conv", "linear", "softmax", "scale")
ANN_ONLY = ("softmax", "scale")

# published full-scale energies (pJ) for the ANN baseline and three spiking
# variants, with the percentage each variant was reported to use
REFERENCE_ANN_PJ = 2.14e11
REFERENCE_ROWS = (
    ("STSA T=4", 2.26e10, 0.105),
    ("SDSA T=4", 2.06e10, 0.096),
    ("STSA T=1", 8.84e9, 0.0411),
)


@dataclass(frozen=True)
class CostConstants:
    e_add: float = 0.9
    e_mac: float = 4.6

    def __post_init__(self):
        if self.e_add <= 0 or self.e_mac <= 0 or self.e_mac <= self.e_add:
            raise ValueError("need 0 < e_add < e_mac")


@dataclass
class LayerCost:
    name: str
    kind: str
    flops: int
    firing_rate: float | None = None
    timesteps: int = 1

    def __post_init__(self):
        if self.flops < 0:
            raise ValueError(f"{self.name}: negative flops")
        if self.firing_rate is not None and not 0.0 <= self.firing_rate <= 1.0:
            raise ValueError(f"{self.name}: firing rate {self.firing_rate} outside [0, 1]")


def flops_of(desc: dict) -> int:
    """FLOP count (one MAC = one unit) for a layer descriptor.

    Descriptors: ``{"kind": "qkv", "N", "D"}``, ``{"kind": "projection", "N", "D"}``,
    ``{"kind": "attention-core", "N", "D"}``, ``{"kind": "conv", "L", "c_in", "c_out", "k"}``,
    ``{"kind": "linear", "N", "d_in", "d_out"}``, ``{"kind": "softmax"|"scale", "N"}``.
    """
    kind = desc.get("kind")
    try:
        if kind == "qkv":
            return 3 * desc["N"] * desc["D"] ** 2
        if kind == "projection":
            return desc["N"] * desc["D"] ** 2
        if kind == "attention-core":
            return desc["N"] * desc["D"]
        if kind == "conv":
            return desc["L"] * desc["c_in"] * desc["c_out"] * desc["k"]
        if kind == "linear":
            return desc["N"] * desc["d_in"] * desc["d_out"]
        if kind == "softmax":
            return 2 * desc["N"] ** 2
        if kind == "scale":
            return desc["N"] ** 2
    except KeyError as exc:
        raise ConfigurationError(f"layer descriptor for {kind!r} lacks {exc}") from None
    raise ConfigurationError(f"unknown layer kind {kind!r}; expected one of {KINDS}")


def spiking_energy(cost: LayerCost, k: CostConstants = CostConstants()) -> float:
    if cost.kind in ANN_ONLY:
        raise ContractError(f"{cost.name}: {cost.kind} has no spiking counterpart")
    if cost.firing_rate is None:
        raise ContractError(f"{cost.name}: spiking energy needs a measured firing rate")
    return cost.timesteps * cost.firing_rate * k.e_add * cost.flops


def ann_energy(cost: LayerCost, k: CostConstants = CostConstants()) -> float:
    return k.e_mac * cost.flops


def ann_attention_extras(n: int, d: int, k: CostConstants = CostConstants()) -> dict:
    """MAC energies the ANN twin pays per attention block of length ``n``."""
    return {
        "core": k.e_mac * n * d * d,
        "softmax": k.e_mac * 2 * n * n,
        "scale": k.e_mac * n * n,
    }


def energy_ratio(snn_pj: float, ann_pj: float) -> float:
    return snn_pj / ann_pj


def ratio_check(tolerance_pp: float = 0.1) -> list[dict]:
    """Recompute the published spiking/ANN energy percentages from the raw energies."""
    rows = []
    for label, snn, claimed in REFERENCE_ROWS:
        ratio = energy_ratio(snn, REFERENCE_ANN_PJ)
        rows.append(
            {
                "model": label,
                "snn_pj": snn,
                "ann_pj": REFERENCE_ANN_PJ,
                "ratio": ratio,
                "reported": claimed,
                "ok": abs(ratio - claimed) * 100 <= tolerance_pp,
            }
        )
    return rows


# reports


@dataclass
class LayerEnergy:
    name: str
    kind: str
    timesteps: int
    positions: int
    flops: int
    firing_rate: float
    snn_pj: float
    ann_pj: float
    ac_ops: int


@dataclass
class EnergyReport:
    layers: list
    ann_extras: list  # (name, kind, pJ) for ANN-only attention terms
    params: int
    timesteps: int
    firing_rates: "FiringRateTable | None" = None
    constants: CostConstants = field(default_factory=CostConstants)

    @property
    def total_snn(self) -> float:
        return float(sum(l.snn_pj for l in self.layers))

    @property
    def total_ann(self) -> float:
        return float(sum(l.ann_pj for l in self.layers) + sum(pj for _, _, pj in self.ann_extras))

    @property
    def ratio(self) -> float:
        return self.total_snn / self.total_ann if self.total_ann else 0.0

    @property
    def measured_ac_ops(self) -> int:
        return int(sum(l.ac_ops for l in self.layers))

    @property
    def measured_snn(self) -> float:
        return self.constants.e_add * self.measured_ac_ops

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "timesteps": self.timesteps,
            "constants": asdict(self.constants),
            "total_snn_pj": self.total_snn,
            "total_ann_pj": self.total_ann,
            "ratio": self.ratio,
            "measured_ac_ops": self.measured_ac_ops,
            "measured_snn_pj": self.measured_snn,
            "layers": [asdict(l) for l in self.layers],
            "ann_extras": [{"name": n, "kind": k, "ann_pj": pj} for n, k, pj in self.ann_extras],
            "firing_rates": self.firing_rates.to_dict() if self.firing_rates else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        head = f"{'layer':<34} {'kind':<15} {'T':>2} {'N':>6} {'FLOPs':>12} {'rate':>7} {'SNN pJ':>12} {'ANN pJ':>12} {'AC ops':>10}"
        lines = [head, "-" * len(head)]
        for l in self.layers:
            lines.append(
                f"{l.name:<34} {l.kind:<15} {l.timesteps:>2} {l.positions:>6} {l.flops:>12d} {l.firing_rate:>7.4f} "
                f"{l.snn_pj:>12.4g} {l.ann_pj:>12.4g} {l.ac_ops:>10d}"
            )
        for name, kind, pj in self.ann_extras:
            lines.append(f"{name:<34} {kind:<15} {'':>2} {'':>6} {'':>12} {'':>7} {'-':>12} {pj:>12.4g} {'':>10}")
        lines.append("-" * len(head))
        lines.append(f"parameters {self.params}   time steps {self.timesteps}")
        lines.append(f"spiking total {self.total_snn:.6g} pJ   ANN total {self.total_ann:.6g} pJ   ratio {self.ratio:.4f}")
        lines.append(f"measured accumulates {self.measured_ac_ops} -> {self.measured_snn:.6g} pJ")
        return "\n".join(lines)


def _layer_flops(rec: instrument.LayerRecord) -> int:
    n = rec.positions
    if rec.kind == "qkv":
        return flops_of({"kind": "qkv", "N": n, "D": rec.dims["d"]})
    if rec.kind == "attention-core":
        return flops_of({"kind": "attention-core", "N": n, "D": rec.dims["d"]})
    if rec.kind == "conv":
        return flops_of({"kind": "conv", "L": n, **rec.dims})
    return flops_of({"kind": "linear", "N": n, **rec.dims})


def report_from_session(sess: instrument.Session, params: int, timesteps: int, k: CostConstants = CostConstants()) -> EnergyReport:
    layers, extras = [], []
    for rec in sess.layers.values():
        flops = _layer_flops(rec)
        cost = LayerCost(rec.name, rec.kind, flops, rec.rate, rec.timesteps)
        if rec.kind == "attention-core":
            # the ANN twin's attention core is N * D^2 per block
            ann = k.e_mac * rec.positions * rec.dims["d"] ** 2
        else:
            ann = ann_energy(cost, k)
        layers.append(LayerEnergy(rec.name, rec.kind, rec.timesteps, rec.positions, flops, rec.rate, spiking_energy(cost, k), ann, rec.ac_ops))
        if rec.kind == "qkv":
            stage = rec.name.rsplit(".", 1)[0]
            sq = sum(n * n for n in rec.seq_lengths)
            extras.append((f"{stage}.softmax", "softmax", k.e_mac * 2 * sq))
            extras.append((f"{stage}.scale", "scale", k.e_mac * sq))
    return EnergyReport(layers, extras, params, timesteps, constants=k)


# firing-rate tables


ATTN_SECTIONS = (
    ("Spiking Sequential Attention", "sequential", (("Q", "q"), ("K", "k"), ("V", "v"), ("Linear", "linear"))),
    ("Spiking Temporal Attention", "temporal", (("Q", "q"), ("K", "k"), ("V", "v"), ("Linear", "linear"))),
)
FF_SECTION = ("Spiking FeedForward", "ff", (("Conv1", "conv1"), ("Conv2", "conv2")))


@dataclass
class RateTable:
    title: str
    columns: list
    rows: list  # (section, site, [values], avg)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["section", "site"] + self.columns + ["AVG"])
        for section, site, values, avg in self.rows:
            w.writerow([section, site] + [f"{v:.6f}" for v in values] + [f"{avg:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len(s) for s, _, _, _ in self.rows] + [7])
        head = f"{'':<{width}} {'':<8}" + "".join(f"{c:>9}" for c in self.columns) + f"{'AVG':>9}"
        lines = [self.title, head]
        for section, site, values, avg in self.rows:
            lines.append(f"{section:<{width}} {site:<8}" + "".join(f"{v:>9.4f}" for v in values) + f"{avg:>9.4f}")
        return "\n".join(lines)


@dataclass
class FiringRateTable:
    tables: list

    def to_dict(self) -> dict:
        return {
            t.title: {"columns": t.columns + ["AVG"], "rows": [[s, site, v, a] for s, site, v, a in t.rows]}
            for t in self.tables
        }

    def to_csv(self) -> str:
        return "\n".join(f"# {t.title}\n{t.to_csv()}" for t in self.tables)

    def to_text(self) -> str:
        return "\n\n".join(t.to_text() for t in self.tables)

    def table(self, title: str) -> RateTable:
        for t in self.tables:
            if t.title == title:
                return t
        raise KeyError(title)


def _rate(sites: dict, name: str) -> float:
    st = sites.get(name)
    return st.rate if st is not None else 0.0


def _stack_table(title: str, prefix: str, n_layers: int, variant: str, sites: dict) -> RateTable:
    sections = [s for s in ATTN_SECTIONS if s[1] in _stages(variant)] + [FF_SECTION]
    rows = []
    for label, stage, entries in sections:
        for site_label, site in entries:
            if stage == "ff":
                names = [f"{prefix}.{i}.ff.{site}" for i in range(n_layers)]
            else:
                names = [f"{prefix}.{i}.{stage}.{site}" for i in range(n_layers)]
            vals = [_rate(sites, n) for n in names]
            rows.append((label, site_label, vals, float(np.mean(vals))))
    return RateTable(title, [f"Layer{i + 1}" for i in range(n_layers)], rows)


def _stages(variant: str) -> tuple:
    return {"stsa": ("sequential", "temporal"), "sdsa-only": ("sequential",), "temporal-only": ("temporal",)}[variant]


def firing_table_from_sites(sites: dict, cfg) -> FiringRateTable:
    enc = _stack_table("Spiking Phoneme Encoder", "encoder", cfg.N, cfg.attention, sites)
    rows = []
    for label, key in (("Duration Predictor", "duration"), ("Energy Predictor", "energy"), ("Pitch Predictor", "pitch")):
        vals = [_rate(sites, f"variance.{key}.conv{i + 1}") for i in range(cfg.pred_convs)]
        rows.append((label, "", vals, float(np.mean(vals))))
    va = RateTable("Spiking Variance Adapter", [f"FR_Conv{i + 1}" for i in range(cfg.pred_convs)], rows)
    dec = _stack_table("Spiking Mel Decoder", "decoder", cfg.M, cfg.attention, sites)
    return FiringRateTable([enc, va, dec])


def _profile(model: SpikingTTS, batch: PhonemeBatch, count_ops: bool, verify: bool = False) -> instrument.Session:
    with no_grad(), instrument.Session(count_ops=count_ops, verify=verify) as sess:
        model.forward(batch, training=False, teacher_forcing=batch.durations is not None)
    return sess


def record_firing_rates(model: SpikingTTS, batch: PhonemeBatch) -> FiringRateTable:
    """Per-site firing rates (ones / valid elements): layers across, sites down, plus AVG."""
    sess = _profile(model, batch, count_ops=False)
    return firing_table_from_sites(sess.sites, model.cfg)


def compare(model: SpikingTTS, batch: PhonemeBatch, k: CostConstants = CostConstants(), verify: bool = False) -> EnergyReport:
    """Profile one eval-mode forward and price it both ways."""
    sess = _profile(model, batch, count_ops=True, verify=verify)
    report = report_from_session(sess, model.num_parameters(), model.cfg.T, k)
    report.firing_rates = firing_table_from_sites(sess.sites, model.cfg)
    return report
