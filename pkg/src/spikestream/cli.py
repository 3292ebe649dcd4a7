"""``spikestream`` command-line entry point.

Every command prints a JSON summary on success.  Failures print a single
JSON line ``{"error": kind, "message": ..., ...}`` to stderr and exit
nonzero; see ``EXIT_CODES``.  Files and directories are staged under a
temporary name and renamed into place.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import config as runconfig
from . import energy, harness, plotting
from .attention import RunContext, time_dependency
from .checks import end_to_end, primitive_suite
from .model import EmptyOutputError, VocabularyError, embed
from .neurons import IntegrityError
from .tensor import ConfigurationError, ContractError, DimensionError, serialize

EXIT_CODES = {"usage": 2, "config": 2, "input": 2, "io": 3, "format": 3, "integrity": 4, "diverged": 5, "check": 6, "internal": 70}
DEFAULT_SEED = 42


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    def __init__(self, message: str, payload: dict | None = None):
        super().__init__(message)
        self.payload = payload or {}


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# output helpers


def emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


@contextmanager
def staged_dir(out):
    """Yield a temp directory next to ``out``; it replaces ``out`` on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
    try:
        yield tmp
        if out.is_dir():
            shutil.rmtree(out)
        elif out.exists():
            out.unlink()
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def write_text(path, text: str) -> None:
    serialize.atomic_write_bytes(path, text.encode())


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def parse_tokens(raw: str) -> list[int]:
    try:
        tokens = [int(t) for t in raw.replace(" ", "").split(",") if t != ""]
    except ValueError:
        raise UsageError(f"--tokens must be comma-separated integers, got {raw!r}") from None
    if not tokens:
        raise UsageError("--tokens is empty")
    return tokens


def _seed(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(runconfig.SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigurationError(f"{runconfig.SEED_ENV} must be an integer, got {env!r}") from None
    return DEFAULT_SEED


def _load_data(path, model_cfg) -> harness.SyntheticDataset:
    ds = harness.SyntheticDataset.load(path)
    if ds.vocab_size > model_cfg.vocab_size:
        raise ConfigurationError(f"dataset vocabulary {ds.vocab_size} exceeds model vocab_size {model_cfg.vocab_size}")
    if ds.n_mel != model_cfg.n_mel:
        raise ConfigurationError(f"dataset has n_mel={ds.n_mel} but the model expects {model_cfg.n_mel}")
    return ds


# commands


def cmd_dataset(args) -> dict:
    seed = _seed(args.seed)
    ds = harness.gen_synthetic(seed, args.items, args.vocab, (args.len_min, args.len_max), args.n_mel)
    ds.save(args.out)
    digest = hashlib.sha256(Path(args.out).read_bytes()).hexdigest()
    return {"command": "dataset", "out": str(args.out), "seed": seed, "items": len(ds), "sha256": digest}


def _train_extras(log: harness.TrainLog, make_figure: bool) -> dict:
    comps = sorted(log.components[0]) if log.components else []
    rows = [[s, f"{t:.10g}"] + [f"{c[k]:.10g}" for k in comps] for s, t, c in zip(log.steps, log.total, log.components)]
    extras = {
        "loss.csv": csv_text(["step", "total"] + comps, rows),
        "train_log.json": json.dumps({k: v for k, v in log.to_dict().items() if k != "wall_clock"}, indent=2, sort_keys=True),
    }
    if make_figure and log.steps:
        fig = plotting.loss_figure(log.steps, log.total, {k: [c[k] for c in log.components] for k in comps})
        extras["loss.png"] = plotting.to_bytes(fig)
    return extras


def cmd_train(args) -> dict:
    cfg = runconfig.load(args.config)
    cfg = cfg.override(steps=args.steps)
    ds = _load_data(args.data, cfg.model)
    ckpt, log = harness.train(cfg.model, ds, snapshot_every=args.snapshot_every, log_every=args.log_every)
    data_sha = hashlib.sha256(Path(args.data).read_bytes()).hexdigest()
    ckpt.run = {**cfg.to_dict(), "data": {"file": Path(args.data).name, "sha256": data_sha, **ds.params()}}
    ckpt.save(args.out, _train_extras(log, not args.no_figures))
    return {
        "command": "train",
        "out": str(args.out),
        "steps": ckpt.step,
        "initial_loss": log.total[0] if log.total else None,
        "final_loss": log.total[-1] if log.total else None,
        "seconds": round(log.wall_clock[-1], 3) if log.wall_clock else 0.0,
        "digest": harness.checkpoint_digest(args.out),
    }


def cmd_synthesize(args) -> dict:
    ckpt = harness.Checkpoint.load(args.ckpt)
    tokens = parse_tokens(args.tokens)
    mel, rasters = harness.synthesize(ckpt, tokens)
    harness.export_mel(mel, args.out_mel, csv_path=args.out_mel_csv)
    events = {}
    with staged_dir(args.out_rasters) as tmp:
        for site, spikes in rasters.items():
            events[site] = harness.export_raster(spikes, tmp / f"{site}.csv")
        index = {site: {"shape": list(rasters[site].shape), "events": n} for site, n in events.items()}
        (tmp / "index.json").write_text(json.dumps({"tokens": tokens, "sites": index}, indent=2, sort_keys=True))
    figures = []
    if args.figures:
        figures.append(str(plotting.save(plotting.mel_figure(mel, "synthesized"), Path(args.figures) / "mel.png")))
        figures.append(str(plotting.save(plotting.raster_figure(rasters), Path(args.figures) / "rasters.png")))
    return {
        "command": "synthesize",
        "tokens": tokens,
        "frames": int(mel.shape[0]),
        "out_mel": str(args.out_mel),
        "out_rasters": str(args.out_rasters),
        "sites": len(rasters),
        "events": int(sum(events.values())),
        "figures": figures,
    }


def _split_layer(name: str) -> tuple[str, str]:
    parts = name.split(".")
    if len(parts) > 2 and parts[1].isdigit():
        return ".".join(parts[:2]), ".".join(parts[2:])
    return parts[0], ".".join(parts[1:])


def trace_lines(report: energy.EnergyReport) -> str:
    lines = []
    for l in report.layers:
        layer, stage = _split_layer(l.name)
        lines.append(json.dumps({"layer": layer, "stage": stage, "firing_rate": l.firing_rate, "ac_ops": l.ac_ops}, sort_keys=True))
    return "\n".join(lines) + "\n"


def _ratio_check_lines(rows) -> list[str]:
    return [
        f"{r['model']:<10} {r['snn_pj']:.3g} / {r['ann_pj']:.3g} = {r['ratio']:.4f}  reported {r['reported']:g}  {'ok' if r['ok'] else 'MISMATCH'}"
        for r in rows
    ]


def cmd_profile_energy(args) -> dict:
    result = {"command": "profile-energy"}
    if args.table3_check:
        rows = energy.ratio_check(args.tolerance_pp)
        for line in _ratio_check_lines(rows):
            print(line, file=sys.stderr)
        result["ratio_check"] = rows
        if not all(r["ok"] for r in rows):
            raise CheckFailed("published energy ratios not reproduced", {"ratio_check": rows})
    if args.ckpt is None:
        if not args.table3_check:
            raise UsageError("profile-energy needs --ckpt/--data/--out or --table3-check")
        return result
    if args.data is None or args.out is None:
        raise UsageError("profile-energy with --ckpt also needs --data and --out")
    ckpt = harness.Checkpoint.load(args.ckpt)
    ds = _load_data(args.data, ckpt.config)
    batch = harness.collate(ds.items[: args.items])
    report = energy.compare(ckpt.model(), batch, verify=True)
    rates = report.firing_rates
    with staged_dir(args.out) as tmp:
        (tmp / "report.json").write_text(report.to_json())
        (tmp / "report.txt").write_text(report.to_text() + "\n")
        (tmp / "firing_rates.csv").write_text(rates.to_csv())
        (tmp / "firing_rates.txt").write_text(rates.to_text() + "\n")
        (tmp / "trace.jsonl").write_text(trace_lines(report))
        layer_rows = [[l.name, l.kind, l.timesteps, l.positions, l.flops, f"{l.firing_rate:.8f}", f"{l.snn_pj:.6f}", f"{l.ann_pj:.6f}", l.ac_ops] for l in report.layers]
        (tmp / "layers.csv").write_text(csv_text(["layer", "kind", "T", "N", "flops", "firing_rate", "snn_pj", "ann_pj", "ac_ops"], layer_rows))
        manifest = {"checkpoint": str(args.ckpt), "data": str(args.data), "items": len(batch.lengths), "config": ckpt.config.to_dict(), "run": ckpt.run}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        if not args.no_figures:
            plotting.save(plotting.energy_figure(report), tmp / "energy.png")
            plotting.save(plotting.firing_rate_figure(rates), tmp / "firing_rates.png")
    print(report.to_text(), file=sys.stderr)
    result.update(
        out=str(args.out),
        params=report.params,
        timesteps=report.timesteps,
        total_snn_pj=report.total_snn,
        total_ann_pj=report.total_ann,
        ratio=report.ratio,
        measured_snn_pj=report.measured_snn,
    )
    return result


def cmd_gradcheck(args) -> dict:
    cfg = runconfig.load(args.config, preset="tiny")
    prims = primitive_suite(args.primitive_tol, seed=args.seed)
    e2e = end_to_end(cfg.model, samples=args.samples, tol=args.tol, seed=args.seed)
    for name, rep in prims.items():
        print(f"{name:<22} {rep}", file=sys.stderr)
    print(f"{'end-to-end':<22} {e2e.report}", file=sys.stderr)
    payload = {
        "command": "gradcheck",
        "tol": args.tol,
        "primitive_tol": args.primitive_tol,
        "primitives": {k: {"max_rel_error": r.max_rel_error, "checked": r.n_checked, "passed": r.passed} for k, r in prims.items()},
        "end_to_end": {"max_rel_error": e2e.report.max_rel_error, "checked": e2e.report.n_checked, "passed": e2e.report.passed, "params": e2e.n_params, "missing": e2e.missing},
    }
    if args.out:
        write_text(args.out, json.dumps(payload, indent=2, sort_keys=True))
    failed = [k for k, r in prims.items() if not r.passed] + ([] if e2e.report.passed else ["end-to-end"]) + (["missing-gradients"] if e2e.missing else [])
    if failed:
        raise CheckFailed(f"gradient check failed: {', '.join(failed)}", payload)
    return payload


def _probe(model, ds, cfg) -> np.ndarray:
    batch = harness.collate(ds.items[: min(4, len(ds))])
    x = embed(batch.tokens, model.embedding.table, cfg.T).data
    ctx = RunContext.for_lengths(batch.lengths, batch.tokens.shape[1], training=False)
    return time_dependency(model.encoder[0].attn, x, ctx)


def cmd_ablate(args) -> dict:
    cfg = runconfig.load(args.config)
    cfg = cfg.override(steps=args.steps)
    m = cfg.model
    if args.data:
        ds = _load_data(args.data, m)
    else:
        ds = harness.gen_synthetic(m.seed, cfg.items, m.vocab_size, (cfg.len_min, cfg.len_max), m.n_mel)
    variants = ["stsa", "sdsa-only", "temporal-only"] if args.attention == "all" else [args.attention]
    rows = []
    for variant in variants:
        vcfg = runconfig.RunConfig(m, cfg.preset).override(attention=variant).model
        ckpt, log = harness.train(vcfg, ds, snapshot_every=0)
        model = ckpt.model()
        metrics = harness.evaluate(model, ds)
        dep = _probe(model, ds, vcfg)
        rows.append(
            {
                "attention": variant,
                "initial_loss": log.total[0],
                "final_loss": log.total[-1],
                "template_r": harness.template_correlation(model, ds),
                "future_dependency": float(np.triu(dep, 1).max()) if dep.shape[0] > 1 else 0.0,
                "past_dependency": float(np.tril(dep, -1).max()) if dep.shape[0] > 1 else 0.0,
                **metrics,
            }
        )
    result = {"command": "ablate", "steps": m.steps, "T": m.T, "results": rows, "config": cfg.to_dict()}
    if args.out:
        keys = list(rows[0])
        with staged_dir(args.out) as tmp:
            (tmp / "ablation.json").write_text(json.dumps(result, indent=2, sort_keys=True))
            (tmp / "ablation.csv").write_text(csv_text(keys, [[r[k] for k in keys] for r in rows]))
            if not args.no_figures:
                plotting.save(plotting.ablation_figure(rows), tmp / "ablation.png")
        result["out"] = str(args.out)
    return result


# parser


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="spikestream", description="Spiking text-to-speech toolkit: data, training, synthesis, energy profiling.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)

    d = sub.add_parser("dataset", help="generate a synthetic phoneme/mel dataset", description="Generate a synthetic token-template dataset.")
    d.add_argument("--seed", type=int, default=None, help=f"generator seed (default: ${runconfig.SEED_ENV} or {DEFAULT_SEED})")
    d.add_argument("--items", type=int, default=32, help="number of utterances (default: 32)")
    d.add_argument("--vocab", type=int, default=16, help="vocabulary size including the pad token 0 (default: 16)")
    d.add_argument("--n-mel", type=int, default=20, help="mel bins per frame (default: 20)")
    d.add_argument("--len-min", type=int, default=4, help="shortest utterance in tokens (default: 4)")
    d.add_argument("--len-max", type=int, default=8, help="longest utterance in tokens (default: 8)")
    d.add_argument("--out", required=True, help="dataset file to write")
    d.set_defaults(func=cmd_dataset)

    t = sub.add_parser("train", help="train a model on a dataset", description="Teacher-forced training; writes a checkpoint directory.")
    t.add_argument("--config", default=None, help="key=value run config (default: reference preset)")
    t.add_argument("--data", required=True, help="dataset file from the dataset command")
    t.add_argument("--steps", type=int, default=None, help="optimizer steps (overrides the config)")
    t.add_argument("--out", required=True, help="checkpoint directory to write")
    t.add_argument("--snapshot-every", type=int, default=100, help="record firing rates every N steps, 0 disables (default: 100)")
    t.add_argument("--log-every", type=int, default=0, help="print a progress line every N steps, 0 disables (default: 0)")
    t.add_argument("--no-figures", action="store_true", help="skip the loss-curve figure")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", help="synthesize a mel spectrogram from tokens", description="Predicted-duration inference for one utterance.")
    s.add_argument("--ckpt", required=True, help="checkpoint directory")
    s.add_argument("--tokens", required=True, help='comma-separated token ids, e.g. "1,4,2"')
    s.add_argument("--out-mel", required=True, help="mel output file (SPKT tensor)")
    s.add_argument("--out-mel-csv", default=None, help="optional CSV copy of the mel, one frame per row")
    s.add_argument("--out-rasters", required=True, help="directory for per-site spike rasters (CSV t,b,l,d)")
    s.add_argument("--figures", default=None, help="directory for mel and raster figures")
    s.set_defaults(func=cmd_synthesize)

    e = sub.add_parser("profile-energy", help="spiking vs ANN energy report", description="Instrumented energy and firing-rate profile of a checkpoint.")
    e.add_argument("--ckpt", default=None, help="checkpoint directory to profile")
    e.add_argument("--data", default=None, help="dataset file supplying the profiling batch")
    e.add_argument("--out", default=None, help="report directory to write")
    e.add_argument("--items", type=int, default=8, help="utterances in the profiling batch (default: 8)")
    e.add_argument("--table3-check", action="store_true", help="recompute the published spiking/ANN energy ratios")
    e.add_argument("--tolerance-pp", type=float, default=0.1, help="allowed ratio deviation in percentage points (default: 0.1)")
    e.add_argument("--no-figures", action="store_true", help="skip the energy and firing-rate figures")
    e.set_defaults(func=cmd_profile_energy)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks", description="Per-primitive and end-to-end finite-difference checks.")
    g.add_argument("--config", default=None, help="key=value run config (default: tiny preset)")
    g.add_argument("--tol", type=float, default=1e-3, help="end-to-end max relative error (default: 1e-3)")
    g.add_argument("--primitive-tol", type=float, default=1e-4, help="per-primitive max relative error (default: 1e-4)")
    g.add_argument("--samples", type=int, default=200, help="parameters sampled end to end (default: 200)")
    g.add_argument("--seed", type=int, default=0, help="sampling seed (default: 0)")
    g.add_argument("--out", default=None, help="optional JSON report file")
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="compare attention variants", description="Train and evaluate attention variants on the same data.")
    a.add_argument("--config", default=None, help="key=value run config (default: reference preset)")
    a.add_argument("--attention", choices=["stsa", "sdsa-only", "temporal-only", "all"], default="all", help="variant to run (default: all)")
    a.add_argument("--data", default=None, help="dataset file (default: generate from the config)")
    a.add_argument("--steps", type=int, default=None, help="optimizer steps per variant (overrides the config)")
    a.add_argument("--out", default=None, help="directory for ablation.json/.csv and figure")
    a.add_argument("--no-figures", action="store_true", help="skip the ablation figure")
    a.set_defaults(func=cmd_ablate)
    return p


def _classify(exc: BaseException) -> tuple[str, dict]:
    if isinstance(exc, UsageError):
        return "usage", {}
    if isinstance(exc, runconfig.ConfigError):
        return "config", {"line": exc.line, "path": None if exc.path is None else str(exc.path)}
    if isinstance(exc, CheckFailed):
        return "check", {}
    if isinstance(exc, harness.TrainingDiverged):
        return "diverged", {}
    if isinstance(exc, (IntegrityError, ContractError, DimensionError, EmptyOutputError)):
        return "integrity", {}
    if isinstance(exc, serialize.FormatError):
        return "format", {}
    if isinstance(exc, (ConfigurationError, VocabularyError, ValueError)):
        return "config" if isinstance(exc, ConfigurationError) else "input", {}
    if isinstance(exc, OSError):
        return "io", {}
    return "internal", {}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("spikestream: a command is required (see --help)")
        emit(args.func(args))
        return 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        kind, extra = _classify(exc)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(json.dumps({"error": kind, "message": message, **{k: v for k, v in extra.items() if v is not None}}, sort_keys=True), file=sys.stderr)
        return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
