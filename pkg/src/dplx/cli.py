"""Command-line entry point: ``dplx <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 file-format error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_FORMAT = 0, 2, 3, 4

log = logging.getLogger("dplx")


class ConfigError(ValueError):
    pass


def _threads() -> None:
    n = os.environ.get("DPLX_THREADS")
    if n:
        import torch

        torch.set_num_threads(max(1, int(n)))


def _require(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} file not found: {p}")
    return p


def parse_overrides(items: list[str] | None) -> dict[str, dict]:
    """``section.key=value`` pairs; values parsed as JSON when possible."""
    out: dict[str, dict] = {"actor": {}, "train": {}, "solver": {}}
    for item in items or []:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in out:
            raise ConfigError(f"bad --config {item!r}; expected actor.|train.|solver.KEY=VALUE")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out[section][name] = value
    return out


def _build(cls, base: dict, overrides: dict):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - fields
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**{**base, **overrides})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def _load_json(path: Path) -> dict:
    text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON at byte offset {exc.pos}: {exc.msg}") from exc


class FormatError(ValueError):
    pass


def _device(args):
    from .device import Device

    path = _require(args.device, "device")
    try:
        return Device.from_dict(_load_json(path))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: not a device file ({exc})") from exc


# --- subcommands -----------------------------------------------------------

def cmd_synth(args) -> int:
    from .device import DeviceSpec, desk_spec, full_spec, synthesize_device, save_device

    if args.spec:
        d = _load_json(_require(args.spec, "spec"))
        if args.seed is not None:
            d["seed"] = args.seed
        spec = DeviceSpec.from_dict(d)
    else:
        seed = 0 if args.seed is None else args.seed
        spec = {"desk": desk_spec, "full": full_spec}[args.preset](seed)
    spec.validate()
    device = synthesize_device(spec)
    out = args.out or "device.json"
    save_device(device, out)
    print(f"wrote {out}: {device.n_screws} screws, untuned magnitude "
          f"{device.untuned_magnitude:.4f} turns, fingerprint {device.fingerprint()[:16]}")
    return EXIT_OK


def _policy(args, device):
    if not args.ckpt:
        return None
    from .actor import ActorPolicy, load_checkpoint

    actor, meta = load_checkpoint(_require(args.ckpt, "ckpt"))
    if actor.config.n_screws != device.n_screws:
        raise ConfigError(
            f"checkpoint predicts {actor.config.n_screws} screws, device has {device.n_screws}")
    fp = meta.get("device_fingerprint")
    if fp is not None and fp != device.fingerprint():
        raise ConfigError("checkpoint was trained on a different device")
    return ActorPolicy(actor, device.passbands)


def cmd_gen_data(args) -> int:
    from . import dataset, metrics
    from .training import collect_dataset

    device = _device(args)
    policy = _policy(args, device)
    if args.n is None or args.n < 0:
        raise ConfigError("--n must be a non-negative integer")
    if args.roll_in < 0:
        raise ConfigError("--roll-in must be >= 0")
    scale = None
    if args.scale_min is not None:
        if not 0 < args.scale_min <= 1:
            raise ConfigError("--scale-min must lie in (0, 1]")
        scale = (args.scale_min, 1.0)
    ds = collect_dataset(device, policy, args.n, args.roll_in, seed=args.seed or 0,
                         magnitude=args.magnitude, scale_range=scale)
    out = args.out or "data.dpxd"
    dataset.save(ds, out)
    msg = f"wrote {out}: {len(ds)} records"
    if len(ds):
        a = np.array([metrics.areas(c[0], device.passbands) for c in ds.curves.astype(float)])
        msg += f"; median areas low {np.median(a[:, 0]):.1f} high {np.median(a[:, 1]):.1f}"
    print(msg)
    return EXIT_OK


def _load_sets(paths) -> list:
    from . import dataset

    return [dataset.load(_require(p, "data")) for p in paths]


def cmd_train(args) -> int:
    import torch

    from .actor import ActorConfig, build_actor, load_checkpoint, save_checkpoint
    from .dataset import Dataset
    from .training import TrainingConfig, TrainingDiverged, train

    device = _device(args)
    if not args.data:
        raise ConfigError("--data is required")
    parts = _load_sets(args.data)
    train_set = Dataset.concat(parts) if len(parts) > 1 else parts[0]
    held = Dataset.concat(_load_sets(args.held_out)) if args.held_out else None
    ov = parse_overrides(args.config)
    tcfg = _build(TrainingConfig, {"seed": args.seed or 0}, ov["train"])
    actor = None
    if args.ckpt:
        actor, meta = load_checkpoint(_require(args.ckpt, "ckpt"), tcfg.torch_dtype)
        acfg = actor.config
        if ov["actor"]:
            raise ConfigError("actor.* overrides cannot be combined with --ckpt")
    else:
        acfg = _build(ActorConfig, {"n_screws": device.n_screws}, ov["actor"])
    if acfg.n_screws != device.n_screws:
        raise ConfigError("actor screw count differs from device")
    out = Path(args.out or "actor.pt")
    history_path = Path(args.history) if args.history else out.with_name(out.name + ".history.csv")

    def progress(row):
        log.info("epoch %d train %.5f held-out %s", row["epoch"], row["train_loss"],
                 row.get("held_out_loss"))

    extra = {"device_fingerprint": device.fingerprint(), "training": dataclasses.asdict(tcfg)}
    try:
        actor, history = train(train_set, held, device, acfg, tcfg, actor=actor, progress=progress)
    except TrainingDiverged as exc:
        save_checkpoint(exc.actor, out, {**extra, "diverged": True})
        _write_history(history_path, exc.history)
        print(f"error: {exc}; last finite parameters saved to {out}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(actor, out, extra)
    _write_history(history_path, history)
    best = min(history, key=lambda r: r.get("held_out_loss", r["train_eval_loss"]))
    print(f"wrote {out}; best epoch {best['epoch']}: train {best['train_eval_loss']:.5f}"
          + (f", held-out {best['held_out_loss']:.5f}" if "held_out_loss" in best else ""))
    return EXIT_OK


def _write_history(path: Path, rows: list[dict]) -> None:
    cols = ["epoch", "train_loss", "train_eval_loss", "held_out_loss"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def cmd_eval_gen(args) -> int:
    from .actor import load_checkpoint
    from .training import eval_generalization

    device = _device(args)
    actor, meta = load_checkpoint(_require(args.ckpt, "ckpt"))
    fp = meta.get("device_fingerprint")
    if fp is not None and fp != device.fingerprint():
        raise ConfigError("checkpoint was trained on a different device")
    if not args.data:
        raise ConfigError("--data is required (one or more evaluation sets)")
    rows = eval_generalization(actor, device, _load_sets(args.data))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["set", "records", "loss", "zero_baseline"])
    for r in rows:
        w.writerow([r["set"], r["records"], repr(r["loss"]), repr(r["baseline"])])
    sys.stdout.write(buf.getvalue())
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    return EXIT_OK


def cmd_tune(args) -> int:
    from .device import Environment, randomize
    from .solver import SolverConfig, tune

    device = _device(args)
    if not args.ckpt:
        raise ConfigError("--ckpt is required")
    policy = _policy(args, device)
    ov = parse_overrides(args.config)
    seed = args.seed or 0
    scfg = _build(SolverConfig, {"seed": seed}, ov["solver"])
    start = randomize(device, np.random.default_rng(seed), args.magnitude)
    report = tune(Environment(device, start), policy, scfg, record_states=bool(args.curves))
    out = args.out or "report.json"
    Path(out).write_text(report.to_json())
    if args.curves:
        d = Path(args.curves)
        d.mkdir(parents=True, exist_ok=True)
        for k, state in enumerate(report.states):
            (d / f"step_{k:03d}.csv").write_text(state.to_csv())
    last = report.steps[-1]
    print(f"wrote {out}: final areas low {last['area_low']:.1f} high {last['area_high']:.1f} "
          f"(sum {last['area_sum']:.1f}); rotations/screw mean {report.mean_rotations:.2f}, "
          f"total {report.total_rotations}; fine steps {report.fine_steps}")
    return EXIT_OK


def _state_for_debug(args):
    from .device import randomize, sweep
    from .sim import SweepState

    if args.csv:
        rows = np.loadtxt(_require(args.csv, "csv"), delimiter=",", skiprows=1, ndmin=2)
        return SweepState.from_curves(rows[:, 0], rows[:, 1:4].T), None
    device = _device(args)
    pos = device.golden if args.golden else randomize(device, np.random.default_rng(args.seed or 0))
    return sweep(device, pos), device


def cmd_area(args) -> int:
    from . import metrics

    state, device = _state_for_debug(args)
    if device is None:
        device = _device(args)
    a = metrics.areas(state.s11, device.passbands)
    print("passband,start,stop,area")
    for name, (start, stop), v in zip(("low", "high"), device.passbands, a):
        print(f"{name},{start},{stop},{v!r}")
    return EXIT_OK


def cmd_peaks(args) -> int:
    from . import metrics

    state, _ = _state_for_debug(args)
    print("curve,index,freq_ghz,amplitude_db,prominence_db")
    for name, curve in zip(("S11", "S21", "S31"), state.curves()):
        for p in metrics.find_peaks(curve, args.prominence):
            print(f"{name},{p.index},{state.freq[p.index]!r},{p.amplitude!r},{p.prominence!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dplx", description="Cavity duplexer tuning toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, *flags):
        p = sub.add_parser(name)
        for flag in flags:
            flag(p)
        p.set_defaults(func=func)
        return p

    def device(p): p.add_argument("--device")
    def out(p): p.add_argument("--out")
    def seed(p): p.add_argument("--seed", type=int)
    def ckpt(p): p.add_argument("--ckpt")
    def config(p): p.add_argument("--config", action="append", metavar="KEY=VALUE")
    def magnitude(p): p.add_argument("--magnitude", type=float, help="untuned noise, turns")

    p = add("synth", cmd_synth, out, seed)
    p.add_argument("--spec", help="DeviceSpec JSON file")
    p.add_argument("--preset", choices=("desk", "full"), default="desk")

    p = add("gen-data", cmd_gen_data, device, out, seed, ckpt, magnitude)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--roll-in", type=int, default=0)
    p.add_argument("--scale-min", type=float,
                   help="draw each record's noise scale log-uniformly in [scale-min, 1]")

    p = add("train", cmd_train, device, out, seed, ckpt, config)
    p.add_argument("--data", action="append")
    p.add_argument("--held-out", action="append", help="repeatable; files are concatenated")
    p.add_argument("--history", help="per-epoch CSV (default: <out>.history.csv)")

    p = add("eval-gen", cmd_eval_gen, device, out, ckpt)
    p.add_argument("--data", action="append")

    p = add("tune", cmd_tune, device, out, seed, ckpt, config, magnitude)
    p.add_argument("--curves", help="directory for per-step sweep CSVs")

    for name, func in (("area", cmd_area), ("peaks", cmd_peaks)):
        p = add(name, func, device, seed)
        p.add_argument("--csv", help="sweep CSV instead of a device state")
        p.add_argument("--golden", action="store_true")
        if name == "peaks":
            p.add_argument("--prominence", type=float, default=3.0)
    return parser


def main(argv: list[str] | None = None) -> int:
    from .dataset import DatasetFormatError
    from .device import SpecError, SynthesisError
    from .sim import DegenerateConfiguration
    from .solver import TuneError
    from .training import FingerprintMismatch

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    _threads()
    try:
        return args.func(args)
    except (ConfigError, SpecError, FingerprintMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (SynthesisError, DegenerateConfiguration, TuneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
