import numpy as np
import pytest

from spikestream import energy, harness, plotting
from spikestream.model import ModelConfig, SpikingTTS

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@pytest.fixture(scope="module")
def tiny_report():
    cfg = ModelConfig.tiny()
    ds = harness.gen_synthetic(3, 4, cfg.vocab_size, (3, 5), cfg.n_mel)
    return energy.compare(SpikingTTS(cfg), harness.collate(ds.items))


def figures(report):
    rng = np.random.default_rng(0)
    rasters = {"encoder.0.sequential.q": rng.random((2, 1, 5, 8)) < 0.3, "postnet.linear": np.zeros((2, 1, 7, 4), bool)}
    rows = [
        {"attention": "stsa", "final_loss": 0.2, "template_r": 0.9},
        {"attention": "sdsa-only", "final_loss": 0.3, "template_r": 0.8},
    ]
    return {
        "mel": lambda: plotting.mel_figure(rng.standard_normal((12, 4)), "mel", reference=np.zeros((12, 4))),
        "raster": lambda: plotting.raster_figure(rasters),
        "loss": lambda: plotting.loss_figure([0, 1, 2], [3.0, 2.0, 1.5], {"mel": [2.0, 1.5, 1.0]}),
        "energy": lambda: plotting.energy_figure(report),
        "firing": lambda: plotting.firing_rate_figure(report.firing_rates),
        "ablation": lambda: plotting.ablation_figure(rows),
    }


@pytest.mark.parametrize("name", ["mel", "raster", "loss", "energy", "firing", "ablation"])
def test_figure_writes_png(name, tiny_report, tmp_path):
    make = figures(tiny_report)[name]
    out = plotting.save(make(), tmp_path / "sub" / f"{name}.png")
    data = out.read_bytes()
    assert data.startswith(PNG_MAGIC)
    assert list((tmp_path / "sub").iterdir()) == [out]


@pytest.mark.parametrize("name", ["loss", "energy", "ablation"])
def test_rendering_is_deterministic(name, tiny_report):
    first = plotting.to_bytes(figures(tiny_report)[name]())
    second = plotting.to_bytes(figures(tiny_report)[name]())
    assert first == second


def test_saved_file_matches_bytes(tiny_report, tmp_path):
    make = figures(tiny_report)["loss"]
    path = plotting.save(make(), tmp_path / "loss.png")
    assert path.read_bytes() == plotting.to_bytes(make())


def test_other_formats(tiny_report):
    svg = plotting.to_bytes(figures(tiny_report)["loss"](), fmt="svg")
    assert b"<svg" in svg


def test_size_keeps_ratio():
    w, h = plotting.size(5.0, 0.5)
    assert (w, h) == (5.0, 2.5)
