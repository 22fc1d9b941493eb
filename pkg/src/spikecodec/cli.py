"""Command-line front end: ``spikecodec {encode,dynamics,train,eval,energy}``.

Exit codes: 0 ok, 2 usage/config error, 3 input/output error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import analysis, coding, energy
from .data import DataFormatError, load_dataset
from .network import NetworkSpec, SpikeDrivenError, build
from .neuron import LifConfig
from .svg import line_plot
from .tensor import ConvParams, BatchNormParams, ShapeError, he_normal, same_padding
from .tensorio import FormatError, load_checkpoint, read_tensor, save_checkpoint, write_sidecar, write_tensor
from .training import TrainConfig, TrainingDiverged, evaluate, records_to_csv, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("spikecodec")

DYNAMICS_SCHEMES = coding.SCHEMES + ("repeat",)

_SECTION_KEYS = {
    "encoder": {"scheme", "steps", "channels", "kernel", "K", "r", "stem", "lif"},
    "network": {f.name for f in fields(NetworkSpec)},
    "train": {f.name for f in fields(TrainConfig)},
    "analysis": {"scheme", "steps", "bins"},
    "energy": {"mac_per_step"},
}


class UsageError(ValueError):
    pass


def load_config(path) -> dict:
    """Read and validate a JSON config; unknown sections or keys are errors."""
    if path is None:
        return {k: {} for k in _SECTION_KEYS}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: top level must be an object")
    unknown = set(doc) - set(_SECTION_KEYS)
    if unknown:
        raise UsageError(f"{path}: unknown config sections {sorted(unknown)}")
    cfg = {}
    for section, keys in _SECTION_KEYS.items():
        body = doc.get(section, {})
        if not isinstance(body, dict):
            raise UsageError(f"{path}: section {section!r} must be an object")
        bad = set(body) - keys
        if bad:
            raise UsageError(f"{path}: unknown keys in {section!r}: {sorted(bad)}")
        cfg[section] = dict(body)
    # construct typed configs now so schema errors surface before any work
    try:
        TrainConfig.from_dict(cfg["train"])
        if cfg["network"]:
            NetworkSpec.from_dict(dict(cfg["network"]))
        if "lif" in cfg["encoder"]:
            LifConfig(**cfg["encoder"]["lif"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from exc
    return cfg


def resolve_seed(flag) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("SPIKECODEC_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"SPIKECODEC_SEED must be an integer, got {env!r}") from exc


def _pick(flag, section: dict, key, default):
    if flag is not None:
        return flag
    return section.get(key, default)


def _as_batch(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None, None]
    if arr.ndim == 3:
        return arr[None]
    if arr.ndim == 4:
        return arr
    raise ShapeError(f"input tensor must be [H,W], [C,H,W] or [B,C,H,W], got shape {arr.shape}")


def _encoder_from_config(scheme, steps, channels_in, enc_cfg, stem_kind, seed) -> coding.EncoderSpec:
    lif = LifConfig(**enc_cfg.get("lif", {}))
    if scheme not in coding.TRAINABLE:
        return coding.EncoderSpec(scheme, steps, lif=lif)
    rng = np.random.default_rng(seed)
    K = enc_cfg.get("K", 4)
    r = enc_cfg.get("r")
    if stem_kind == "identity":
        gau = coding.GauParams.init(rng, steps, channels_in, r=r, K=K) if scheme == "gac" else None
        return coding.identity_stem(scheme, steps, channels_in, gau, lif)
    channels = enc_cfg.get("channels", 16)
    kernel = enc_cfg.get("kernel", 3)
    conv = ConvParams(he_normal(rng, (channels, channels_in, kernel, kernel)), padding=same_padding(kernel))
    bn = BatchNormParams.identity(channels, mode="eval")
    gau = coding.GauParams.init(rng, steps, channels, r=r, K=K) if scheme == "gac" else None
    return coding.EncoderSpec(scheme, steps, conv, bn, gau, lif)


def _encode_images(images, scheme, steps, enc_cfg, stem_kind, seed):
    if scheme == "repeat":
        data = np.ascontiguousarray(np.broadcast_to(images, (steps,) + images.shape))
        return None, coding.EncodedSequence(data, False)
    spec = _encoder_from_config(scheme, steps, images.shape[1], enc_cfg, stem_kind, seed)
    return spec, coding.encode(images, spec, seed=seed)


# -- subcommands --------------------------------------------------------------

def cmd_encode(args) -> int:
    cfg = load_config(args.config)
    enc = cfg["encoder"]
    seed = resolve_seed(args.seed)
    scheme = _pick(args.scheme, enc, "scheme", "direct")
    steps = _pick(args.steps, enc, "steps", 4)
    if scheme not in coding.SCHEMES:
        raise UsageError(f"unknown scheme {scheme!r}; expected one of {coding.SCHEMES}")
    stem_kind = _pick(args.stem, enc, "stem", "identity")
    images = _as_batch(read_tensor(args.input))
    _, seq = _encode_images(images, scheme, steps, enc, stem_kind, seed)
    write_tensor(args.out, seq.data)
    meta = {"scheme": scheme, "steps": steps, "seed": seed, "stem": stem_kind,
            "binary": int(seq.binary), "shape": "x".join(map(str, seq.data.shape))}
    if seq.weights_per_step is not None:
        meta["weights_per_step"] = ",".join(repr(float(w)) for w in seq.weights_per_step)
    write_sidecar(str(args.out) + ".meta", meta)
    print(f"wrote {args.out} shape={meta['shape']} binary={meta['binary']}")
    return EXIT_OK


def cmd_dynamics(args) -> int:
    cfg = load_config(args.config)
    an, enc = cfg["analysis"], cfg["encoder"]
    seed = resolve_seed(args.seed)
    scheme = _pick(args.scheme, an, "scheme", "direct")
    steps = _pick(args.steps, an, "steps", 4)
    bins = _pick(args.bins, an, "bins", analysis.DEFAULT_BINS)
    if scheme not in DYNAMICS_SCHEMES:
        raise UsageError(f"unknown scheme {scheme!r}; expected one of {DYNAMICS_SCHEMES}")
    stem_kind = _pick(args.stem, enc, "stem", "identity")
    images = _as_batch(read_tensor(args.input))
    spec, seq = _encode_images(images, scheme, steps, enc, stem_kind, seed)
    curve = analysis.empirical_entropy(seq, bins)
    if scheme in ("direct", "gac"):
        stem = coding.stem_output(images, spec)
        _, duration = analysis.duration_map(scheme, steps, stem, spec.lif)
    elif scheme in analysis.DURATION_SCHEMES:
        _, duration = analysis.duration_map(scheme, steps)
    else:
        duration = None
    report = analysis.DynamicsReport(scheme, steps, duration, curve, bins,
                                     empirical_duration=analysis.empirical_duration(curve))
    summary = report.summary()
    if duration is None:
        summary["T_duration"] = "na"
    line = " ".join(f"{k}={summary[k]}" for k in ("scheme", "T", "T_duration", "T_empirical", "bins"))
    print(line)
    if args.report:
        Path(args.report).write_text(report.to_csv())
        write_sidecar(str(args.report) + ".meta", summary)
    if args.svg:
        Path(args.svg).write_text(line_plot({scheme: curve}, f"observer entropy ({scheme}, T={steps})",
                                            "t", "H_t (bits)"))
    return EXIT_OK


def _network_spec(cfg, args, dataset) -> NetworkSpec:
    net_cfg = dict(cfg["network"])
    if args.scheme is not None:
        net_cfg["scheme"] = args.scheme
    if args.steps is not None:
        net_cfg["T"] = args.steps
    c, h, w = dataset.images.shape[1:]
    net_cfg.setdefault("in_channels", c)
    net_cfg.setdefault("image_size", (h, w))
    if "n_classes" not in net_cfg and len(dataset):
        net_cfg["n_classes"] = max(10, int(dataset.labels.max()) + 1)
    spec = NetworkSpec.from_dict(net_cfg)
    if spec.scheme not in coding.SCHEMES:
        raise UsageError(f"unknown scheme {spec.scheme!r}")
    if (spec.in_channels, tuple(spec.image_size)) != (c, (h, w)):
        raise UsageError(f"network expects {spec.in_channels}x{spec.image_size}, data is {c}x{(h, w)}")
    return spec


def _try_load(source, split, limit):
    try:
        return load_dataset(source, split, limit)
    except (FileNotFoundError, DataFormatError):
        return None


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed)
    tcfg = dict(cfg["train"])
    for key, flag in (("epochs", args.epochs), ("lr0", args.lr), ("batch_size", args.batch_size),
                      ("workers", args.workers)):
        if flag is not None:
            tcfg[key] = flag
    tcfg["seed"] = seed
    train_cfg = TrainConfig.from_dict(tcfg)
    dataset = load_dataset(args.data, "train", args.limit)
    eval_set = _try_load(args.data, "test", args.eval_limit)
    spec = _network_spec(cfg, args, dataset)
    net = build(spec, seed)

    def progress(rec):
        if rec.step == -1:
            log.info("epoch %d acc=%.4f", rec.epoch, rec.acc)

    result = train(net, dataset, train_cfg, eval_set, on_record=progress)
    state = result.best_state if result.best_state is not None else net.state_dict()
    meta = {"network": spec.to_dict(), "train": asdict(train_cfg), "seed": seed,
            "best_acc": result.best_acc, "best_epoch": result.best_epoch}
    save_checkpoint(args.out, state, meta)
    log_path = args.log or str(args.out) + ".log.csv"
    Path(log_path).write_text(records_to_csv(result.records))
    if args.svg:
        train_pts = [(i, r.loss) for i, r in enumerate(x for x in result.records if x.step >= 0)]
        Path(args.svg).write_text(line_plot({"train loss": train_pts}, "training loss", "step", "loss"))
    acc = "na" if result.best_acc is None else f"{result.best_acc:.6f}"
    print(f"wrote {args.out} epochs={train_cfg.epochs} best_acc={acc}")
    return EXIT_OK


def load_network(path):
    arrays, meta = load_checkpoint(path)
    if "network" not in meta:
        raise FormatError(f"{path}: checkpoint has no network description")
    net = build(NetworkSpec.from_dict(meta["network"]), seed=0)
    try:
        net.load_state_dict(arrays)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    net.set_mode(False)
    return net, meta


def cmd_eval(args) -> int:
    net, meta = load_network(args.ckpt)
    seed = resolve_seed(args.seed)
    dataset = load_dataset(args.data, args.split, args.limit)
    net.check_spike_driven = args.check_spike_driven
    acc = evaluate(net, dataset, seed=seed, workers=args.workers or 1)
    extra = f" spike_checks={net.spike_checks}" if args.check_spike_driven else ""
    print(f"accuracy={acc:.6f} n={len(dataset)}{extra}")
    return EXIT_OK


def cmd_energy(args) -> int:
    cfg = load_config(args.config)
    net, _ = load_network(args.ckpt)
    seed = resolve_seed(args.seed)
    batch = _as_batch(read_tensor(args.batch))
    mac_per_step = args.mac_per_step or bool(cfg["energy"].get("mac_per_step", False))
    report = energy.network_energy(net, batch, seed=seed, mac_per_step=mac_per_step)
    text = report.to_csv()
    if args.report:
        Path(args.report).write_text(text)
    t = report.totals()
    print(f"E_total_pJ={t['E_total_pJ']!r} MAC_share={t['MAC_share']:.6f} AC_share={t['AC_share']:.6f}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _add_common(p, workers=False):
    p.add_argument("--config", help="JSON config (sections encoder/network/train/analysis/energy)")
    p.add_argument("--seed", type=int, help="random seed (default: $SPIKECODEC_SEED or 0)")
    if workers:
        p.add_argument("--workers", type=int, help="threads for batched evaluation")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spikecodec", description="SNN input coding toolkit")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="encode an image tensor file into a spike/time sequence")
    _add_common(p)
    p.add_argument("--scheme", help=f"one of {', '.join(coding.SCHEMES)}")
    p.add_argument("--steps", type=int, help="number of time steps T")
    p.add_argument("--input", required=True, help="T4SN tensor [H,W], [C,H,W] or [B,C,H,W]")
    p.add_argument("--out", required=True, help="output T4SN tensor [T,B,C,H,W]")
    p.add_argument("--stem", choices=("identity", "random"), help="stem for direct/gac (default identity)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("dynamics", help="dynamics duration and observer entropy curve")
    _add_common(p)
    p.add_argument("--scheme", help=f"one of {', '.join(DYNAMICS_SCHEMES)}")
    p.add_argument("--steps", type=int, help="number of time steps T")
    p.add_argument("--input", required=True, help="T4SN image tensor")
    p.add_argument("--bins", type=int, help="histogram bins for real-valued sequences")
    p.add_argument("--stem", choices=("identity", "random"))
    p.add_argument("--report", help="CSV path for the entropy curve")
    p.add_argument("--svg", help="optional SVG plot of the entropy curve")
    p.set_defaults(func=cmd_dynamics)

    p = sub.add_parser("train", help="train a network and write a checkpoint")
    _add_common(p, workers=True)
    p.add_argument("--data", required=True, help="MNIST IDX directory or dataset manifest")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--scheme", help="encoder scheme (overrides network.scheme)")
    p.add_argument("--steps", type=int, help="time steps (overrides network.T)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--limit", type=int, help="use only the first N training samples")
    p.add_argument("--eval-limit", type=int, help="use only the first N test samples")
    p.add_argument("--log", help="loss CSV path (default <out>.log.csv)")
    p.add_argument("--svg", help="optional SVG loss curve")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p, workers=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="MNIST IDX directory or dataset manifest")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--limit", type=int)
    p.add_argument("--check-spike-driven", action="store_true",
                   help="assert every conv/fc input is binary during the pass")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("energy", help="theoretical energy of a checkpoint on an input batch")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--batch", required=True, help="T4SN image tensor")
    p.add_argument("--report", help="CSV path for the per-layer report")
    p.add_argument("--mac-per-step", action="store_true", help="bill the stem MACs once per time step")
    p.set_defaults(func=cmd_energy)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FormatError, DataFormatError, ShapeError, OSError) as exc:
        print(f"spikecodec: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, SpikeDrivenError, FloatingPointError, ArithmeticError) as exc:
        print(f"spikecodec: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, TypeError, KeyError) as exc:
        print(f"spikecodec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
