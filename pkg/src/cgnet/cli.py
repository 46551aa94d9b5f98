"""``cgnet`` command line: synth, train, eval, infer, info, gradcheck.

Settings come from built-in defaults, then an optional flat ``key = value``
config file, then command-line flags, each layer overriding the previous one.
"""

import argparse
import colorsys
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import checkpoint as ckpt
from . import dataio, evaluation, gradcheck
from .errors import CGNetError, ConfigError
from .model import CGNet, NetworkConfig
from .training import TrainConfig, TrainState, train_loop

log = logging.getLogger("cgnet")

NET_FIELDS = {f.name: f.default for f in fields(NetworkConfig)}
TRAIN_FIELDS = {f.name: f.default for f in fields(TrainConfig)}
# means default to None, i.e. computed from the training manifest
TRAIN_TYPES = dict(TRAIN_FIELDS, means=(0.0,))
PATH_KEYS = ("manifest", "out_dir", "resume", "categories")
MEANS_KEY = ckpt.STATE_PREFIX + "means"

FLAG_NAMES = {"num_classes": "classes"}


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(key, text):
    """Convert config text to the type of the key's default."""
    default = NET_FIELDS.get(key, TRAIN_TYPES.get(key))
    if key in PATH_KEYS:
        return text
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(v) for v in text.replace(",", " ").split())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def read_config_file(path):
    out = {}
    known = set(NET_FIELDS) | set(TRAIN_FIELDS) | set(PATH_KEYS)
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = parse_value(key, value)
    return out


def _flag(key):
    return "--" + FLAG_NAMES.get(key, key).replace("_", "-")


def _add_net_flags(p):
    g = p.add_argument_group("network")
    for key in ("M", "N", "num_classes", "channels", "dilations", "glo_reduction"):
        default = NET_FIELDS[key]
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
        g.add_argument(_flag(key), dest=key, type=lambda t, k=key: parse_value(k, t), default=None,
                       help=f"(default: {shown})")
    g.add_argument("--sur-mode", dest="sur_mode", choices=("none", "single", "full"), default=None,
                   help="surrounding-context branches (default: full)")
    g.add_argument("--no-glo", dest="use_glo", action="store_const", const=False, default=None,
                   help="drop the global context gate (default: gate on)")
    g.add_argument("--no-injection", dest="input_injection", action="store_const", const=False, default=None,
                   help="do not inject the downsampled image (default: inject)")
    g.add_argument("--activation", choices=("relu", "prelu"), default=None, help="(default: prelu)")
    g.add_argument("--residual", choices=("lrl", "grl", "none"), default=None, help="(default: grl)")
    g.add_argument("--interchannel-1x1", dest="interchannel_1x1", action="store_const", const=True,
                   default=None, help="1x1 conv after the joint feature (default: off)")


def _add_train_flags(p):
    g = p.add_argument_group("training")
    for key, default in TRAIN_FIELDS.items():
        if key == "means":
            help_ = "per-channel means R,G,B (default: computed from the manifest)"
        else:
            shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
            help_ = f"(default: {shown})"
        g.add_argument(_flag(key), dest=key, type=lambda t, k=key: parse_value(k, t), default=None, help=help_)


def _layered(args, keys):
    """Defaults < config file < flags, restricted to ``keys``."""
    merged = {}
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    for key in keys:
        v = getattr(args, key, None)
        if v is not None:
            merged[key] = v
    return merged


def _net_config(settings):
    return NetworkConfig(**{k: v for k, v in settings.items() if k in NET_FIELDS})


def _train_config(settings):
    kw = {k: v for k, v in settings.items() if k in TRAIN_FIELDS}
    if "base_lr" not in kw:
        log.info("base_lr not set; using default %g", TRAIN_FIELDS["base_lr"])
    return TrainConfig(**kw)


def _echo(title, obj):
    for f in fields(obj):
        log.info("%s %s = %s", title, f.name, getattr(obj, f.name))


def cmd_synth(args):
    path = dataio.gen_synthetic(args.out, args.seed, args.count, args.size, args.classes)
    print(path)
    return 0


def cmd_train(args):
    settings = _layered(args, list(NET_FIELDS) + list(TRAIN_FIELDS) + list(PATH_KEYS))
    if "manifest" not in settings:
        raise ConfigError("no manifest given (use --manifest or 'manifest = ...')")
    out_dir = settings.get("out_dir", "run")
    manifest = dataio.read_manifest(settings["manifest"])
    settings.setdefault("num_classes", manifest.num_classes)
    tcfg = _train_config(settings)
    if tcfg.means is None:
        tcfg.means = tuple(float(m) for m in dataio.compute_means(manifest))

    resume = settings.get("resume")
    if resume:
        ncfg, tensors = ckpt.load_checkpoint(resume)
        requested = {k: v for k, v in settings.items() if k in NET_FIELDS}
        clash = [k for k, v in requested.items() if getattr(ncfg, k) != v]
        if clash:
            raise ConfigError(f"network setting {clash[0]!r} differs from the checkpoint being resumed")
        model = CGNet(ncfg, seed=tcfg.seed)
        ckpt.restore_model(model, tensors)
        state = TrainState.from_tensors(tensors)
    else:
        ncfg = _net_config(settings)
        model = CGNet(ncfg, seed=tcfg.seed)
        state = TrainState()
    if ncfg.num_classes != manifest.num_classes:
        raise ConfigError(f"model has {ncfg.num_classes} classes but the manifest declares {manifest.num_classes}")
    _echo("net", ncfg)
    _echo("train", tcfg)
    samples = manifest.load()

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train.log")
    _truncate_log(log_path, state.iteration)
    with open(log_path, "a", encoding="utf-8") as log_file:
        train_loop(model, samples, tcfg, state, log_file, checkpoint_dir=out_dir,
                   extra_state={MEANS_KEY: np.asarray(tcfg.means, dtype=np.float64)})
    final = os.path.join(out_dir, "final.ckpt")
    extra = state.to_tensors()
    extra[MEANS_KEY] = np.asarray(tcfg.means, dtype=np.float64)
    ckpt.save_checkpoint(final, model, extra)
    print(final)
    return 0


def _truncate_log(path, iteration):
    """Keep only records before ``iteration`` so a resumed log matches an unbroken one."""
    if not os.path.exists(path):
        return
    with open(path, encoding="utf-8") as f:
        kept = [line for line in f if line.strip() and int(line.split("\t", 1)[0]) < iteration]
    with open(path, "w", encoding="utf-8") as f:
        f.writelines(kept)


def _load_model(path):
    cfg, tensors = ckpt.load_checkpoint(path)
    model = CGNet(cfg)
    ckpt.restore_model(model, tensors)
    means = tensors.get(MEANS_KEY)
    return model, (None if means is None else tuple(means))


def cmd_eval(args):
    settings = _layered(args, list(PATH_KEYS) + ["means"])
    ckpt_path = args.checkpoint or settings.get("resume")
    if not ckpt_path or "manifest" not in settings:
        raise ConfigError("eval needs --checkpoint and --manifest")
    model, means = _load_model(ckpt_path)
    means = settings.get("means", means)
    manifest = dataio.read_manifest(settings["manifest"], settings.get("categories"))
    if manifest.num_classes != model.cfg.num_classes:
        raise ConfigError(f"checkpoint has {model.cfg.num_classes} classes but the manifest declares "
                          f"{manifest.num_classes}")
    metrics = evaluation.evaluate(model, manifest.load(), means, manifest.categories)
    sys.stdout.write(metrics.to_csv() if args.csv else metrics.to_text())
    return 0


def palette(num_classes):
    """Class ``i`` gets hue ``i/K`` at full saturation and value."""
    return np.array([[round(255 * c) for c in colorsys.hsv_to_rgb(i / num_classes, 1.0, 1.0)]
                     for i in range(num_classes)], dtype=np.float64)


def cmd_infer(args):
    model, means = _load_model(args.checkpoint)
    image = dataio.read_ppm(args.image)
    pred = evaluation.predict(model, image, args.means if args.means is not None else means)
    dataio.write_pgm(args.out, pred)
    if args.color:
        dataio.write_ppm(args.color, palette(model.cfg.num_classes)[pred].transpose(2, 0, 1))
    print(args.out)
    return 0


def cmd_info(args):
    cfg = _net_config(_layered(args, list(NET_FIELDS)))
    model = CGNet(cfg)
    flops, shape = model.flops((1, 3, args.height, args.width))
    params = model.num_params()
    print(f"params {params} ({params / 1e6:.2f} M)")
    print(f"flops {flops} ({flops / 1e9:.2f} G) at 3x{args.height}x{args.width}")
    print(f"scores {shape[1]}x{shape[2]}x{shape[3]} before x8 upsampling")
    return 0


def cmd_gradcheck(args):
    report = gradcheck.kernel_checks(args.tol, args.seed)
    if not args.skip_model:
        report.extend(gradcheck.network_check(tolerance=args.model_tol, seed=args.seed))
    sys.stdout.write(report.to_text())
    return 0 if report.passed else 1


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")
    p = argparse.ArgumentParser(prog="cgnet", description="Context guided segmentation network toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic shapes dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--out", default="synth")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train a network")
    t.add_argument("--config", help="flat 'key = value' settings file")
    t.add_argument("--manifest", default=None, help="training manifest")
    t.add_argument("--out-dir", dest="out_dir", default=None, help="output directory (default: run)")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    _add_net_flags(t)
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="single-scale evaluation")
    e.add_argument("--config", help="flat 'key = value' settings file")
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--manifest", default=None)
    e.add_argument("--categories", default=None, help="class->category map file")
    e.add_argument("--means", type=lambda t: parse_value("means", t), default=None,
                   help="override per-channel means (default: stored in the checkpoint)")
    e.add_argument("--csv", action="store_true", help="emit CSV instead of text")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", parents=[common], help="label one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True, help="input PPM")
    i.add_argument("--out", required=True, help="output PGM label map")
    i.add_argument("--color", default=None, help="optional colour-coded PPM")
    i.add_argument("--means", type=lambda t: parse_value("means", t), default=None,
                   help="override per-channel means (default: stored in the checkpoint)")
    i.set_defaults(func=cmd_infer)

    n = sub.add_parser("info", parents=[common], help="parameter count and FLOPs")
    n.add_argument("--config", help="flat 'key = value' settings file")
    n.add_argument("--height", type=int, default=360, help="(default: 360)")
    n.add_argument("--width", type=int, default=640, help="(default: 640)")
    _add_net_flags(n)
    n.set_defaults(func=cmd_info)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    g.add_argument("--tol", type=float, default=gradcheck.KERNEL_TOL, help="kernel tolerance")
    g.add_argument("--model-tol", dest="model_tol", type=float, default=gradcheck.MODEL_TOL,
                   help="micro network tolerance")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--skip-model", dest="skip_model", action="store_true", help="kernels only")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CGNetError, ValueError, OSError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"cgnet {args.command}: error: {msg}", file=sys.stderr)
        return 1
