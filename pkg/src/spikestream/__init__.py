"""Spiking text-to-speech on a small numpy autograd engine.

Binary spike tensors flow through LIF neurons, spike-driven attention that
mixes along the time-step and sequence axes, a duration/pitch/energy
adaptor and a mel decoder.  An instrumented mode counts accumulate
operations and firing rates for the energy model in :mod:`energy`.
"""

from .attention import RunContext, STSAParams, attention_block, sdsa_gate, stsa, time_dependency
from .energy import CostConstants, EnergyReport, LayerCost, ann_energy, compare, flops_of, record_firing_rates, spiking_energy
from .harness import Checkpoint, SyntheticDataset, evaluate, gen_synthetic, synthesize, train
from .model import ModelConfig, PhonemeBatch, SpikingTTS, length_regulator, loss
from .neurons import LIFParams, LIFState, lif_step, sn_forward, surrogate_grad

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CostConstants",
    "EnergyReport",
    "LIFParams",
    "LIFState",
    "LayerCost",
    "ModelConfig",
    "PhonemeBatch",
    "RunContext",
    "STSAParams",
    "SpikingTTS",
    "SyntheticDataset",
    "ann_energy",
    "attention_block",
    "compare",
    "evaluate",
    "flops_of",
    "gen_synthetic",
    "length_regulator",
    "lif_step",
    "loss",
    "record_firing_rates",
    "sdsa_gate",
    "sn_forward",
    "spiking_energy",
    "stsa",
    "surrogate_grad",
    "synthesize",
    "time_dependency",
    "train",
]
