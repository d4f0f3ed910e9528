"""Command-line entry point: ``spikeres <command> ...``.

Exit status: 0 success, 1 unexpected failure, 2 invalid usage or config,
3 non-finite training loss.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import platform
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, plotting
from .arch import BlockKind, build_network, cifar_spec_for_depth, count_flops, named_spec
from .checkpoint import CheckpointError, load_checkpoint, restore_model, save_checkpoint
from .config import (ConfigError, apply_overrides, config_hash, data_sources, dump_config, gamma2_zero,
                     load_config, network_spec, train_config)
from .data import DataFormatError, Dataset
from .diagnostics import energy as energy_mod
from .diagnostics.isometry import isometry_report
from .diagnostics.landscape import loss_landscape
from .diagnostics.ssim import ssim_radar, write_radar_csv
from .diagnostics.unavailing import NotApplicableError, unavailing_block_rate
from .train import NonFiniteLoss, TrainConfig, evaluate, train, two_phase_train

log = logging.getLogger("spikeres")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NONFINITE = 0, 1, 2, 3


class UsageError(ValueError):
    pass


# -- helpers -------------------------------------------------------------------

def _write_csv(path: Path, rows: list, fields: Optional[list] = None) -> Path:
    fields = fields or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    return str(o)


def _clean(o):
    """Replace non-finite floats so the summary stays strict JSON."""
    if isinstance(o, float) and not math.isfinite(o):
        return "inf" if o > 0 else ("-inf" if o < 0 else "nan")
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _versions() -> dict:
    import scipy
    import matplotlib
    return {"spikeres": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "matplotlib": matplotlib.__version__}


def write_manifest(out: Path, command: str, cfg: dict, seed, data_hash: Optional[str] = None, **extra) -> Path:
    doc = {"command": command, "argv": sys.argv[1:], "config": cfg, "config_hash": config_hash(cfg),
           "seed": seed, "data_hash": data_hash, "versions": _versions(),
           "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    doc.update(extra)
    return _write_json(out / "manifest.json", doc)


def _out_dir(args) -> Path:
    out = Path(args.out or f"runs/{args.command}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> dict:
    cfg = load_config(args.config) if getattr(args, "config", None) else {}
    cfg = apply_overrides(cfg, getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        cfg["train.seed"] = str(args.seed)
    return cfg


def _load_data(cfg: dict, spec) -> tuple:
    T = spec.timesteps if cfg.get("data.kind") == "event-frames" else None
    src_train, src_test = data_sources(cfg, spec.num_classes, T, (spec.in_channels, spec.input_size))
    return src_train.load(), src_test.load(), src_train


def _model_from(args, cfg: dict):
    """(model, spec) from --checkpoint or a fresh init described by the config."""
    if getattr(args, "checkpoint", None):
        ck = load_checkpoint(args.checkpoint)
        return restore_model(ck), ck
    spec = network_spec(cfg)
    return build_network(spec, seed=int(cfg.get("train.seed", 0)), gamma2_zero=gamma2_zero(cfg)), None


def _manifest_config(ckpt_path) -> dict:
    m = Path(ckpt_path).with_name("manifest.json")
    if m.exists():
        return json.loads(m.read_text()).get("config", {})
    return {}


# -- commands ------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    spec = network_spec(cfg)
    tcfg = train_config(cfg, args.preset)
    if args.epochs is not None:
        tcfg = TrainConfig(**{**tcfg.to_dict(), "epochs": args.epochs})
    train_ds, test_ds, src = _load_data(cfg, spec)
    model = build_network(spec, seed=tcfg.seed, gamma2_zero=gamma2_zero(cfg))
    (out / "config.cfg").write_text(dump_config(cfg))
    try:
        if cfg.get("run.two_phase", "false").lower() in ("1", "true", "yes"):
            p1 = TrainConfig(**{**tcfg.to_dict(), "epochs": int(cfg.get("run.phase1_epochs", tcfg.epochs)),
                                "lr": float(cfg.get("run.phase1_lr", tcfg.lr)),
                                "weight_decay": float(cfg.get("run.phase1_weight_decay", tcfg.weight_decay))})
            p2 = TrainConfig(**{**tcfg.to_dict(), "lr": float(cfg.get("run.phase2_lr", tcfg.lr)),
                                "weight_decay": float(cfg.get("run.phase2_weight_decay", tcfg.weight_decay))})
            r1, result = two_phase_train(model, train_ds, p1, p2, test_ds, src.augment,
                                         checkpoint_path=out / "phase1.spkr")
            model = result.model
            _write_csv(out / "metrics_phase1.csv", r1.metrics)
        else:
            result = train(model, train_ds, tcfg, test_ds, src.augment, metrics_path=out / "metrics.csv")
    except NonFiniteLoss as exc:
        _write_json(out / "nonfinite_dump.json", exc.dump)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    _write_csv(out / "metrics.csv", result.metrics)
    save_checkpoint(out / "model.spkr", model, result.optimizer, result.epochs_run, result.rng,
                    meta={"config_hash": config_hash(cfg)})
    eval_loss, eval_top1, eval_rate = evaluate(model, test_ds, tcfg.timesteps, tcfg.eval_batch_size)
    plotting.training_curves(result.metrics, out / "training.png")
    final = result.final_metric()
    write_manifest(out, "train", cfg, tcfg.seed, train_ds.digest(), test_data_hash=test_ds.digest(),
                   final_metric=final, eval_top1=eval_top1, eval_loss=eval_loss, eval_firing_rate=eval_rate,
                   checkpoint="model.spkr", first_epoch_loss=result.first_epoch_loss())
    print(f"final metric (mean test top-1, last 5 epochs): {final:.4f}")
    print(f"checkpoint eval top-1: {eval_top1:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args) if args.config or args.set else _manifest_config(args.checkpoint)
    out = _out_dir(args)
    ck = load_checkpoint(args.checkpoint)
    model = restore_model(ck)
    _, test_ds, _ = _load_data(cfg, ck.spec)
    T = int(cfg["train.timesteps"]) if "train.timesteps" in cfg else None
    bs = int(cfg.get("train.eval_batch_size", 200))
    loss_v, top1_v, rate = evaluate(model, test_ds, T, bs)
    doc = {"checkpoint": str(args.checkpoint), "loss": loss_v, "top1": top1_v, "firing_rate": rate,
           "samples": len(test_ds)}
    mpath = Path(args.checkpoint).with_name("manifest.json")
    if mpath.exists():
        recorded = json.loads(mpath.read_text()).get("eval_top1")
        if recorded is not None:
            doc["manifest_top1"] = recorded
            doc["matches_manifest"] = recorded == top1_v
    _write_json(out / "eval.json", doc)
    write_manifest(out, "eval", cfg, cfg.get("train.seed"), test_ds.digest())
    print(f"top-1 {top1_v:.4f}  loss {loss_v:.4f}  firing rate {rate:.4f}")
    if "matches_manifest" in doc:
        print(f"matches manifest: {doc['matches_manifest']}")
    return EXIT_OK


def cmd_depth_sweep(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    kinds = [BlockKind.parse(k).value for k in args.kinds.split(",")]
    depths = [int(d) for d in args.depths.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    tcfg = train_config(cfg, args.preset)
    if args.epochs is not None:
        tcfg = TrainConfig(**{**tcfg.to_dict(), "epochs": args.epochs})
    base = network_spec(cfg)
    train_ds, test_ds, src = _load_data(cfg, base)
    runs, table = [], []
    for kind in kinds:
        for depth in depths:
            accs = []
            for seed in seeds:
                spec = cifar_spec_for_depth(depth, kind, lif=base.lif, input_size=base.input_size,
                                            in_channels=base.in_channels, num_classes=base.num_classes,
                                            downsample=base.downsample)
                model = build_network(spec, seed=seed, gamma2_zero=gamma2_zero(cfg))
                run_cfg = TrainConfig(**{**tcfg.to_dict(), "seed": seed})
                res = train(model, train_ds, run_cfg, test_ds, src.augment)
                train_rows = [m["top1"] for m in res.metrics if m["split"] == "train"]
                row = {"kind": kind, "depth": depth, "seed": seed,
                       "train_top1": float(np.mean(train_rows[-5:])),
                       "test_top1": res.final_metric(), "first_epoch_loss": res.first_epoch_loss()}
                runs.append(row)
                accs.append(row)
                log.info("%s-%d seed %d: train %.4f test %.4f", kind, depth, seed, row["train_top1"],
                         row["test_top1"])
            tr = [r["train_top1"] for r in accs]
            te = [r["test_top1"] for r in accs]
            table.append({"kind": kind, "depth": depth, "seeds": len(accs), "train_top1": float(np.mean(tr)),
                          "train_top1_std": float(np.std(tr)), "test_top1": float(np.mean(te)),
                          "test_top1_std": float(np.std(te))})
    _write_csv(out / "depth_sweep_runs.csv", runs)
    _write_csv(out / "depth_sweep.csv", table)
    plotting.depth_sweep(table, out / "depth_sweep.png")
    write_manifest(out, "depth-sweep", cfg, seeds, train_ds.digest(), kinds=kinds, depths=depths,
                   train=tcfg.to_dict())
    for r in table:
        print(f"{r['kind']:>22s} {r['depth']:4d}  train {100 * r['train_top1']:6.2f}  test {100 * r['test_top1']:6.2f}")
    return EXIT_OK


def _diag_batch(args, cfg, spec) -> tuple:
    _, test_ds, _ = _load_data(cfg, spec)
    n = min(args.batch, len(test_ds))
    return test_ds.x[:n], test_ds.y[:n], test_ds


def cmd_diagnose(args) -> int:
    cfg = _config(args) if (args.config or args.set or not args.checkpoint) else _manifest_config(args.checkpoint)
    out = _out_dir(args)
    model, ck = _model_from(args, cfg)
    spec = model.spec
    x, _, ds = _diag_batch(args, cfg, spec)
    summary: dict = {"model": spec.name, "kind": spec.kind.value, "batch": len(x)}

    iso = isometry_report(model, x, probes=args.probes, seed=args.probe_seed, time_budget=args.time_budget)
    _write_csv(out / "isometry.csv", iso.rows())
    plotting.isometry(iso.rows(), out / "isometry.png")
    summary["isometry"] = iso.summary()

    radar = ssim_radar(model, x)
    write_radar_csv(radar, out / "ssim_radar.csv")
    plotting.ssim_radar(radar, out / "ssim_radar.png", title=spec.kind.value)
    summary["ssim"] = [r["ssim"] for r in radar]

    stats = energy_mod.model_firing_stats(model, x)
    _write_csv(out / "firing.csv", stats.layers)
    plotting.firing_rates(stats, out / "firing.png")
    summary["firing_rate"] = stats.global_rate

    try:
        rates = unavailing_block_rate(model, x)
        _write_csv(out / "unavailing.csv", rates)
        summary["unavailing"] = rates
    except NotApplicableError as exc:
        summary["unavailing"] = f"not applicable: {exc}"
    _write_json(out / "summary.json", summary)
    write_manifest(out, "diagnose", cfg, cfg.get("train.seed"), ds.digest(), probes=args.probes)
    print(f"global firing rate {stats.global_rate:.4f}")
    for b in iso.blocks:
        print(f"{b.block:>8s} phi {b.phi:.4f} (pred {b.predicted:.4f})  var {b.phi_var:.4f}")
    return EXIT_OK


def cmd_landscape(args) -> int:
    cfg = _config(args) if (args.config or args.set or not args.checkpoint) else _manifest_config(args.checkpoint)
    out = _out_dir(args)
    model, _ = _model_from(args, cfg)
    x, y, ds = _diag_batch(args, cfg, model.spec)
    grid = loss_landscape(model, x, y, resolution=args.resolution, span=args.span, seed=args.direction_seed)
    grid.write_csv(out / "landscape.csv")
    plotting.landscape(grid, out / "landscape.png")
    _write_json(out / "summary.json", {"center_loss": grid.center_loss, "cosine": grid.cosine, **grid.meta,
                                       "direction_seed": grid.seed, "min_loss": float(np.min(grid.loss)),
                                       "max_finite_loss": float(np.max(grid.loss[np.isfinite(grid.loss)]))
                                       if np.isfinite(grid.loss).any() else None})
    write_manifest(out, "landscape", cfg, args.direction_seed, ds.digest())
    print(f"center loss {grid.center_loss:.6f}  |cos(delta, eta)| {grid.cosine:.2e}")
    return EXIT_OK


def cmd_energy(args) -> int:
    out = _out_dir(args)
    cfg: dict = {}
    if args.checkpoint or args.config:
        cfg = _config(args) if args.config else _manifest_config(args.checkpoint)
        model, _ = _model_from(args, cfg)
        x, _, ds = _diag_batch(args, cfg, model.spec)
        report = energy_mod.syops_count(model, x, args.T, literal=args.literal)
        _write_csv(out / "energy_layers.csv", report.rows())
        source = "measured"
    else:
        if not args.spec:
            raise UsageError("energy needs --spec (with --rate) or --checkpoint/--config")
        if args.syops is not None:
            flops = _flops_for(args)
            report = energy_mod.energy_from_counts(flops, args.syops)
        else:
            if args.rate is None or args.T is None:
                raise UsageError("--rate and --T are required with --spec unless --syops is given")
            report = energy_mod.energy_from_rate(_flops_for(args), args.rate, args.T)
        source = args.flops_source
    doc = {**report.summary(), "flops_source": source, "spec": args.spec, "rate": args.rate, "T": args.T}
    _write_json(out / "energy.json", doc)
    _write_csv(out / "energy.csv", [doc])
    plotting.energy(report, out / "energy.png")
    write_manifest(out, "energy", cfg, None)
    print(f"FLOPs {_si(report.flops)}  SyOPs {_si(report.syops)}")
    print(f"E(ANN) {_si(report.e_ann, 'J')}  E(SNN) {_si(report.e_snn, 'J')}  ratio {report.ratio:.3f}")
    return EXIT_OK


def _si(v: float, unit: str = "") -> str:
    """4 significant digits with an SI prefix: 4.766G, 4.289 mJ."""
    if unit:
        for f, pre in ((1, ""), (1e-3, "m"), (1e-6, "u"), (1e-9, "n"), (1e-12, "p")):
            if abs(v) >= f:
                return f"{v / f:.4g} {pre}{unit}"
        return f"{v:.4g} {unit}"
    for f, pre in ((1e9, "G"), (1e6, "M"), (1e3, "k")):
        if abs(v) >= f:
            return f"{v / f:.4g}{pre}"
    return f"{v:.4g}"


def _flops_for(args) -> float:
    if args.flops is not None:
        return args.flops
    name = args.spec.lower()
    if args.flops_source == "published":
        if name not in energy_mod.PUBLISHED_FLOPS:
            raise UsageError(f"no published FLOPs for {args.spec!r}; use --flops-source counted or --flops")
        return energy_mod.PUBLISHED_FLOPS[name]
    return float(count_flops(build_network(named_spec(name), seed=None)).residual_path)


def cmd_inspect(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    n_params = int(sum(v.size for v in ck.params.values()))
    doc = {"version": ck.version, "epoch": ck.epoch, "spec": ck.spec.to_dict(), "parameters": n_params,
           "tensors": len(ck.params), "buffers": len(ck.buffers), "optimizer_buffers": len(ck.optimizer),
           "has_rng_state": ck.rng_state is not None, "meta": ck.meta}
    print(json.dumps(doc, indent=2, sort_keys=True, default=_json_default))
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spikeres", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"spikeres {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, ckpt=False):
        sp.add_argument("--out", help="output directory (default runs/<command>)")
        if config:
            sp.add_argument("--config", help="flat key = value experiment file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if ckpt:
            sp.add_argument("--checkpoint", help="SPKR checkpoint")

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.add_argument("--preset", choices=["depth-analysis", "alternatives"])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(sp, ckpt=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("depth-sweep", help="train each (kind, depth) and tabulate accuracy")
    common(sp)
    sp.add_argument("--kinds", default="plain,vanilla,ms")
    sp.add_argument("--depths", default="8,14,20,32")
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--preset", choices=["depth-analysis", "alternatives"])
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_depth_sweep)

    sp = sub.add_parser("diagnose", help="isometry, SSIM radar, firing rates, unavailing rate")
    common(sp, ckpt=True)
    sp.add_argument("--batch", type=int, default=16)
    sp.add_argument("--probes", type=int, default=4096)
    sp.add_argument("--probe-seed", type=int, default=0)
    sp.add_argument("--time-budget", type=float, help="seconds of probing per block before a partial report")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("landscape", help="loss surface along two filter-normalised directions")
    common(sp, ckpt=True)
    sp.add_argument("--batch", type=int, default=100)
    sp.add_argument("--resolution", type=int, default=21)
    sp.add_argument("--span", type=float)
    sp.add_argument("--direction-seed", type=int, default=0)
    sp.set_defaults(func=cmd_landscape)

    sp = sub.add_parser("energy", help="SyOPs and MAC/AC energy estimate")
    common(sp, ckpt=True)
    sp.add_argument("--spec", help="reference network: resnet18, resnet34, resnet104, resnet20-dvs")
    sp.add_argument("--rate", type=float, help="uniform firing rate")
    sp.add_argument("--T", type=int, help="timesteps")
    sp.add_argument("--flops", type=float, help="override FLOPs (MACs per sample per step)")
    sp.add_argument("--syops", type=float, help="use a known SyOPs count instead of rate * T")
    sp.add_argument("--flops-source", choices=["published", "counted"], default="published")
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--literal", action="store_true", help="also count accumulates spike by spike")
    sp.set_defaults(func=cmd_energy)

    sp = sub.add_parser("inspect-checkpoint", help="print a checkpoint's header and metadata")
    sp.add_argument("checkpoint")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if not hasattr(args, "out"):
        args.out = None
    try:
        return args.func(args)
    except (ConfigError, UsageError, DataFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE


if __name__ == "__main__":
    sys.exit(main())
