"""Command-line entry point: gen-data | train | eval | infer | gradcheck.

Configuration comes from built-in defaults, overridden by an optional
key = value config file (--config), overridden by command-line flags;
any config key can also be set directly with --key=value.  Unknown keys
are a hard error.  Exit codes: 0 success, 1 runtime failure, 2 invalid
configuration or arguments.
"""

import argparse
import csv
import io
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint, metrics, synth
from .gradcheck import gradient_suite
from .model import NetConfig, init_params, deblur_forward
from .tensor import Tensor, no_grad
from .train import LOG_HEADER, TrainConfig, train_loop
from .synth import LensModel


class ConfigError(Exception):
    pass


def _parse_bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_GEN_DEFAULTS = {
    "count": 16,
    "height": 64,
    "width": 64,
    "regions": 5,
    "focal_depth": 4.0,
    "blur_gain": 1.0,
    "max_radius": 4.0,
}


def _schema():
    """Config key -> (parser, default)."""
    schema = {}
    for f in fields(NetConfig):
        parser = {bool: _parse_bool, int: int, float: float, str: str}[f.type if isinstance(f.type, type) else type(f.default)]
        schema[f.name] = (parser, f.default)
    for f in fields(TrainConfig):
        parser = {int: int, float: float}[type(f.default)]
        schema[f.name] = (parser, f.default)
    for key, default in _GEN_DEFAULTS.items():
        schema[key] = (type(default), default)
    return schema


SCHEMA = _schema()


def _parse_config_file(path):
    values = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _apply(config, updates, origin):
    for key, raw in updates.items():
        if key not in SCHEMA:
            known = ", ".join(sorted(SCHEMA))
            raise ConfigError(f"{origin}: unknown config key {key!r} (known keys: {known})")
        parser, _ = SCHEMA[key]
        try:
            config[key] = parser(raw) if isinstance(raw, str) else raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{origin}: bad value for {key!r}: {exc}") from exc
    return config


def resolve_config(args, extras):
    config = {k: d for k, (_, d) in SCHEMA.items()}
    if args.config:
        _apply(config, _parse_config_file(args.config), str(args.config))
    overrides = {}
    for item in extras:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"unrecognized argument {item!r}; overrides look like --key=value")
        key, _, value = item[2:].partition("=")
        overrides[key] = value
    _apply(config, overrides, "command line")
    for flag, key in (("seed", "seed"), ("count", "count"), ("epochs", "total_epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            config[key] = value
    return config


def _net_config(config):
    kwargs = {f.name: config[f.name] for f in fields(NetConfig)}
    try:
        return NetConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _train_config(config):
    kwargs = {f.name: config[f.name] for f in fields(TrainConfig)}
    try:
        cfg = TrainConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.total_epochs < 0 or cfg.batch_size < 1 or cfg.patch_size < 1:
        raise ConfigError("total_epochs must be >= 0, batch_size and patch_size >= 1")
    return cfg


def _echo_config(config, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {config[k]}" for k in sorted(config)]
    (out_dir / "config_resolved.txt").write_text("\n".join(lines) + "\n")


def _load_model(config, ckpt_path):
    net = _net_config(config)
    store = init_params(net, seed=0)
    checkpoint.load_params(ckpt_path, store)
    return net, store


def _restore(sample, store, net):
    left = Tensor(sample.left[None].astype(np.float32))
    right = Tensor(sample.right[None].astype(np.float32))
    with no_grad():
        out = deblur_forward(left, right, store, net, clamp=True)
    return out.values[0].astype(np.float64)


def cmd_gen_data(args, extras):
    config = resolve_config(args, extras)
    lens = LensModel(config["focal_depth"], config["blur_gain"], config["max_radius"])
    samples = synth.make_samples(
        config["seed"], config["count"], config["height"], config["width"],
        config["regions"], lens,
    )
    manifest = {k: config[k] for k in ("seed", "count", "height", "width", "regions",
                                       "focal_depth", "blur_gain", "max_radius")}
    synth.write_dataset(samples, args.out, manifest)
    _echo_config(config, args.out)
    print(f"wrote {len(samples)} triplets to {args.out}")
    return 0


def cmd_train(args, extras):
    config = resolve_config(args, extras)
    net = _net_config(config)
    tcfg = _train_config(config)
    _echo_config(config, args.out)
    data = [s for _, s in synth.read_dataset(args.data)]

    def progress(epoch, row):
        print(row, flush=True)

    result = train_loop(data, net, tcfg, progress=progress)
    out = Path(args.out)
    (out / "train_log.csv").write_text("\n".join([LOG_HEADER] + result.log_lines) + "\n")
    checkpoint.save_params(out / "last.ckpt", result.params)
    result.params.load_values(result.best_values)
    checkpoint.save_params(out / "best.ckpt", result.params)
    print(f"trained {tcfg.total_epochs} epochs; best epoch {result.best_epoch}")
    return 0


def cmd_eval(args, extras):
    config = resolve_config(args, extras)
    net, store = _load_model(config, args.checkpoint)
    _echo_config(config, args.out)
    out = Path(args.out)
    rows = []
    for sid, sample in synth.read_dataset(args.data):
        restored = _restore(sample, store, net)
        synth.write_png(out / f"{sid}_restored.png", restored)
        sharp = sample.sharp.astype(np.float64)
        rows.append((sid, metrics.psnr(restored, sharp), metrics.ssim(restored, sharp),
                     metrics.mae(restored, sharp)))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "psnr", "ssim", "mae"])
    for sid, p, s, m in rows:
        writer.writerow([sid, f"{p:.6f}", f"{s:.6f}", f"{m:.6f}"])
    arr = np.array([r[1:] for r in rows], dtype=np.float64).mean(axis=0)
    writer.writerow(["mean", f"{arr[0]:.6f}", f"{arr[1]:.6f}", f"{arr[2]:.6f}"])
    (out / "metrics.csv").write_text(buf.getvalue())
    print(f"evaluated {len(rows)} images; mean psnr {arr[0]:.3f} dB")
    return 0


def cmd_infer(args, extras):
    config = resolve_config(args, extras)
    net, store = _load_model(config, args.checkpoint)
    _echo_config(config, args.out)
    out = Path(args.out)
    count = 0
    for sid, sample in synth.read_dataset(args.data, require_sharp=False):
        restored = _restore(sample, store, net)
        synth.write_png(out / f"{sid}_restored.png", restored)
        count += 1
    print(f"restored {count} images to {out}")
    return 0


def cmd_gradcheck(args, extras):
    resolve_config(args, extras)  # surface config errors even here
    t0 = time.perf_counter()
    rows = gradient_suite()
    failed = 0
    for name, err, tol in rows:
        ok = err < tol
        failed += 0 if ok else 1
        print(f"{name:<22s} max_rel_err {err:.3e}  (tol {tol:.0e})  {'PASS' if ok else 'FAIL'}")
    print(f"{len(rows) - failed}/{len(rows)} checks passed in {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="dpalign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=False, data=False, ckpt=False):
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--seed", type=int, help="override the seed")
        if out:
            p.add_argument("--out", type=Path, required=True, help="output directory")
        if data:
            p.add_argument("--data", type=Path, required=True, help="dataset directory")
        if ckpt:
            p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file")

    p = sub.add_parser("gen-data", help="render a synthetic dual-pixel dataset")
    common(p, out=True)
    p.add_argument("--count", type=int, help="number of triplets")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train on a triplet dataset")
    common(p, out=True, data=True)
    p.add_argument("--epochs", type=int, help="override total_epochs")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="restore and score a dataset with ground truth")
    common(p, out=True, data=True, ckpt=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="restore (L, R) pairs without ground truth")
    common(p, out=True, data=True, ckpt=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    common(p)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        return args.fn(args, extras)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
