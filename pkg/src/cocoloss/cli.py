"""Command-line entry point: ``cocoloss <command> [--config FILE] [--key value ...]``.

Every command reads an optional ``key = value`` config file; any config key
can also be given as ``--key`` on the command line, which wins. Unknown
keys are rejected. Exit codes:

    0 ok, 1 gradient check failed, 2 config error, 3 I/O error,
    4 non-finite loss, 5 dimension mismatch, 6 instance-universe mismatch,
    7 no pairs for statistics, 8 degenerate logistic fit
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import formats
from .errors import Degenerate, DimMismatch, NoPairs, NonFiniteLoss, PlacementFailure, UniverseMismatch
from .identify import (
    FusionConfig,
    MissingRegionPolicy,
    RegionParams,
    build_universe,
    fit_logistic,
    identify,
    pair_scores,
    raw_scores,
)
from .losses import CentroidSet
from .trainer import (
    BODY_PRESET,
    FACE_PRESET,
    MlpModel,
    SoftmaxHead,
    TrainConfig,
    forward,
    grad_check,
    init_centroids,
    make_blobs,
    separation_stats,
    train,
)

log = logging.getLogger("cocoloss")

EXIT_GRADCHECK, EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE = 1, 2, 3, 4
EXIT_DIM, EXIT_UNIVERSE, EXIT_NOPAIRS, EXIT_DEGENERATE = 5, 6, 7, 8


class ConfigError(Exception):
    pass


class IOFailure(Exception):
    pass


def _bool(s):
    if isinstance(s, bool):
        return s
    s = str(s).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(s):
    return [x.strip() for x in str(s).split(",") if x.strip()]


def _ints(s):
    return [int(x) for x in _list(s)]


def _floats(s):
    return [float(x) for x in _list(s)]


_TRAIN_DEFAULTS = TrainConfig()

# key -> (parser, default); a default of None means "required"
SCHEMAS = {
    "gen-data": {
        "num_classes": (int, 10),
        "per_class": (int, 200),
        "input_dim": (int, 2),
        "spread": (float, 0.05),
        "seed": (int, 0),
        "sample_seed": (int, -1),
    },
    "train": {
        "data": (str, None),
        "hidden": (_ints, [32]),
        "embed_dim": (int, 8),
        "activation": (str, "relu"),
        "loss": (str, "coco"),
        "preset": (str, ""),
        "learning_rate": (float, _TRAIN_DEFAULTS.learning_rate),
        "lr_decay_factor": (float, _TRAIN_DEFAULTS.lr_decay_factor),
        "lr_decay_every": (int, _TRAIN_DEFAULTS.lr_decay_every),
        "weight_decay": (float, _TRAIN_DEFAULTS.weight_decay),
        "momentum": (float, _TRAIN_DEFAULTS.momentum),
        "optimizer": (str, _TRAIN_DEFAULTS.optimizer),
        "epochs": (int, _TRAIN_DEFAULTS.epochs),
        "batch_size": (int, _TRAIN_DEFAULTS.batch_size),
        "centroid_mode": (str, _TRAIN_DEFAULTS.centroid_mode),
        "temperature": (float, _TRAIN_DEFAULTS.temperature),
        "epsilon": (float, _TRAIN_DEFAULTS.epsilon),
        "seed": (int, 0),
        "stats": (str, ""),
    },
    "embed": {
        "checkpoint": (str, None),
        "input": (str, None),
        "region": (int, 1),
        "id_prefix": (str, ""),
        "hide_labels": (_bool, False),
    },
    "identify": {
        "gallery": (_list, None),
        "probes": (_list, None),
        "fusion": (str, ""),
        "normalize": (_bool, True),
        "policy": (str, ""),
    },
    "gradcheck": {
        "layer_dims": (_ints, [3, 6, 5]),
        "num_classes": (int, 4),
        "batch_size": (int, 8),
        "loss": (str, "coco"),
        "centroid_mode": (str, "parametric"),
        "activation": (str, "tanh"),
        "temperature": (float, 1.0),
        "step": (float, 1e-6),
        "tol": (float, 1e-5),
        "seed": (int, 0),
    },
    "stats": {
        "input": (str, None),
        "bins": (int, 64),
    },
    "fit-fusion": {
        "gallery": (_list, None),
        "probes": (_list, None),
        "iterations": (int, 5000),
        "learning_rate": (float, 1.0),
        "gamma": (_floats, []),
        "policy": (str, MissingRegionPolicy.RENORMALIZE_GAMMA.value),
    },
}

PATH_KEYS = {"data", "checkpoint", "input", "gallery", "probes", "fusion"}


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve(command, args):
    """Merge schema defaults, the config file and command-line overrides."""
    schema = SCHEMAS[command]
    raw = read_config_file(args.config) if args.config else {}
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    for key in schema:
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    if args.seed is not None and "seed" in schema:
        raw["seed"] = args.seed
    cfg = {}
    for key, (parse, default) in schema.items():
        if key in raw:
            try:
                cfg[key] = parse(raw[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw[key]!r} ({exc})") from exc
        elif default is None:
            raise ConfigError(f"missing required key: {key}")
        else:
            cfg[key] = default
    for key in PATH_KEYS & set(cfg):
        paths = cfg[key] if isinstance(cfg[key], list) else [cfg[key]]
        for p in paths:
            if p and not os.path.isfile(p):
                raise IOFailure(f"{key}: no such file {p}")
    return cfg


def _check_out(path, what="--out"):
    if not path:
        raise ConfigError(f"{what} is required")
    d = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(d):
        raise IOFailure(f"output directory {d} does not exist")
    return path


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(cfg, out):
    _check_out(out)
    for key in ("num_classes", "per_class", "input_dim"):
        if cfg[key] < (2 if key == "num_classes" else 1):
            raise ConfigError(f"{key} must be >= {2 if key == 'num_classes' else 1}, got {cfg[key]}")
    if not cfg["spread"] > 0:
        raise ConfigError(f"spread must be positive, got {cfg['spread']}")
    sample_seed = None if cfg["sample_seed"] < 0 else cfg["sample_seed"]
    try:
        ds = make_blobs(cfg["num_classes"], cfg["per_class"], cfg["input_dim"],
                        cfg["spread"], cfg["seed"], sample_seed)
    except PlacementFailure as exc:
        raise ConfigError(str(exc)) from exc
    formats.write_dataset(out, ds)
    formats.write_metadata(out + ".meta", generator="make_blobs", **cfg)
    log.info("wrote %d samples to %s", len(ds), out)
    return 0


def _train_config(cfg):
    params = {k: cfg[k] for k in ("learning_rate", "lr_decay_factor", "lr_decay_every",
                                  "weight_decay", "momentum", "optimizer", "epochs",
                                  "batch_size", "centroid_mode", "temperature",
                                  "epsilon", "seed")}
    if cfg["preset"]:
        presets = {"face": FACE_PRESET, "body": BODY_PRESET}
        if cfg["preset"] not in presets:
            raise ConfigError(f"preset must be one of {sorted(presets)}")
        params.update(presets[cfg["preset"]])
    try:
        return TrainConfig(**params)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(cfg, out):
    _check_out(out)
    stats_path = _check_out(cfg["stats"] or out + ".stats.csv", "stats")
    tc = _train_config(cfg)
    if cfg["loss"] not in ("coco", "softmax"):
        raise ConfigError("loss must be 'coco' or 'softmax'")
    if cfg["activation"] not in ("relu", "tanh"):
        raise ConfigError("activation must be 'relu' or 'tanh'")
    ds = _read(formats.read_dataset, cfg["data"])
    dims = [ds.inputs.shape[1], *cfg["hidden"], cfg["embed_dim"]]
    model = MlpModel.init(dims, cfg["activation"], seed=tc.seed)
    if cfg["loss"] == "coco":
        head = init_centroids(model, ds, tc.centroid_mode, tc.epsilon)
    else:
        head = SoftmaxHead.init(ds.num_classes, cfg["embed_dim"], seed=tc.seed)
    history = train(model, head, ds, tc,
                    log=lambda h: log.info("epoch %d loss %.6f acc %.4f",
                                           h["epoch"], h["loss"], h["train_accuracy"]))
    formats.save_checkpoint(out, formats.Checkpoint(model, head, tc.temperature))
    formats.write_history(stats_path, history)
    return 0


def cmd_embed(cfg, out):
    _check_out(out)
    ckpt = _read(formats.load_checkpoint, cfg["checkpoint"])
    ds = _read(formats.read_dataset, cfg["input"])
    if ds.inputs.shape[1] != ckpt.model.input_dim:
        raise DimMismatch(f"input dim {ds.inputs.shape[1]} vs checkpoint input dim "
                          f"{ckpt.model.input_dim}")
    emb = forward(ckpt.model, ds.inputs)
    ids = [f"{cfg['id_prefix']}{i}" for i in range(len(ds))]
    labels = [None] * len(ds) if cfg["hide_labels"] else [str(int(x)) for x in ds.labels]
    formats.write_embeddings(out, cfg["region"], ids, labels, emb)
    return 0


def _load_stores(gallery_paths, probe_paths):
    galleries = [_read(formats.read_embeddings, p) for p in gallery_paths]
    probes = [_read(formats.read_embeddings, p) for p in probe_paths]
    g_by_region = {g.region_id: g for g in galleries}
    p_by_region = {p.region_id: p for p in probes}
    if len(g_by_region) != len(galleries) or len(p_by_region) != len(probes):
        raise UniverseMismatch("two files claim the same region")
    if set(g_by_region) != set(p_by_region):
        raise UniverseMismatch(f"gallery regions {sorted(g_by_region)} vs probe regions "
                               f"{sorted(p_by_region)}")
    stores = []
    for r in sorted(g_by_region):
        g, p = g_by_region[r], p_by_region[r]
        if g.dim != p.dim:
            raise UniverseMismatch(f"region {r}: gallery dim {g.dim} vs probe dim {p.dim}")
        try:
            stores.append(formats.make_store(g, p))
        except ValueError as exc:
            raise UniverseMismatch(str(exc)) from exc
    return stores


def cmd_identify(cfg, out):
    _check_out(out)
    stores = _load_stores(cfg["gallery"], cfg["probes"])
    regions = [s.region_id for s in stores]
    if cfg["fusion"]:
        fusion = _read(formats.read_fusion, cfg["fusion"])
        missing = set(regions) - set(fusion.regions)
        if missing:
            raise UniverseMismatch(f"fusion file lacks regions {sorted(missing)}")
        fusion = FusionConfig({r: fusion.regions[r] for r in regions}, fusion.missing_region_policy)
    else:
        fusion = FusionConfig.uniform(regions)
    if cfg["policy"]:
        try:
            fusion.missing_region_policy = MissingRegionPolicy(cfg["policy"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    result = identify(stores, fusion, normalize=cfg["normalize"])
    acc = result.accuracy
    with formats.atomic_write(out) as fh:
        fh.write("instance_id,predicted_label,score\n")
        for pid, lab, s in zip(result.probe_ids, result.predictions, result.scores):
            fh.write(f"{pid},{lab},{formats.fmt(s)}\n")
        if acc is not None:
            fh.write(f"accuracy,{formats.fmt(acc)}\n")
    if acc is not None:
        print(f"accuracy,{formats.fmt(acc)}")
    return 0


def cmd_gradcheck(cfg, out):
    if out:
        _check_out(out)
    dims, k, m = cfg["layer_dims"], cfg["num_classes"], cfg["batch_size"]
    if len(dims) < 2 or min(dims) < 1:
        raise ConfigError("layer_dims needs at least two positive entries")
    if k < 2 or m < k:
        raise ConfigError("need num_classes >= 2 and batch_size >= num_classes")
    if cfg["loss"] not in ("coco", "softmax"):
        raise ConfigError("loss must be 'coco' or 'softmax'")
    if not cfg["step"] > 0:
        raise ConfigError("step must be positive")
    rng = np.random.default_rng(cfg["seed"])
    try:
        model = MlpModel.init(dims, cfg["activation"], seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for b in model.biases:
        b += rng.normal(0.0, 0.1, size=b.shape)
    inputs = rng.normal(size=(m, dims[0]))
    labels = np.concatenate([np.arange(k), rng.integers(0, k, m - k)])
    if cfg["loss"] == "softmax":
        head = SoftmaxHead.init(k, dims[-1], seed=cfg["seed"])
    else:
        try:
            head = CentroidSet(rng.normal(size=(k, dims[-1])), cfg["centroid_mode"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    rep = grad_check(model, head, inputs, labels, k, cfg["step"], cfg["tol"], cfg["temperature"])
    lines = [f"max_rel_err,{formats.fmt(rep.max_rel_err)}",
             f"location,{rep.location[0]}{list(rep.location[1])}".replace(", ", ";"),
             f"num_params,{rep.num_params}",
             f"tol,{formats.fmt(rep.tol)}",
             f"passed,{int(rep.passed)}"]
    text = "\n".join(lines) + "\n"
    if out:
        with formats.atomic_write(out) as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0 if rep.passed else EXIT_GRADCHECK


def cmd_stats(cfg, out):
    _check_out(out)
    emb = _read(formats.read_embeddings, cfg["input"])
    if not emb.labeled:
        raise ConfigError("stats needs labelled embeddings")
    if cfg["bins"] < 1:
        raise ConfigError("bins must be >= 1")
    stats = separation_stats(emb.features, np.array(emb.labels, dtype=object), cfg["bins"])
    formats.write_stats(out, stats)
    print(f"margin,{formats.fmt(stats.margin)}")
    return 0


def cmd_fit_fusion(cfg, out):
    _check_out(out)
    try:
        policy = MissingRegionPolicy(cfg["policy"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    stores = _load_stores(cfg["gallery"], cfg["probes"])
    if cfg["gamma"] and len(cfg["gamma"]) != len(stores):
        raise ConfigError(f"gamma has {len(cfg['gamma'])} entries for {len(stores)} regions")
    probe_ids, truth, gallery_ids, gallery_labels = build_universe(stores)
    if any(t is None for t in truth):
        raise ConfigError("fit-fusion needs labelled validation probes")
    gammas = cfg["gamma"] or [1.0 / len(stores)] * len(stores)
    regions = {}
    for st, g in zip(stores, gammas):
        raw = raw_scores(st, probe_ids, gallery_ids)
        pos, neg = pair_scores(raw, truth, gallery_labels)
        if pos.size == 0 or neg.size == 0:
            raise Degenerate(f"region {st.region_id}: need both matching and non-matching pairs")
        b0, b1 = fit_logistic(pos, neg, cfg["iterations"], cfg["learning_rate"])
        log.info("region %d: beta0=%.6g beta1=%.6g gamma=%.6g", st.region_id, b0, b1, g)
        regions[st.region_id] = RegionParams(b0, b1, g)
    try:
        fusion = FusionConfig(regions, policy)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    formats.write_fusion(out, fusion)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "embed": cmd_embed,
    "identify": cmd_identify,
    "gradcheck": cmd_gradcheck,
    "stats": cmd_stats,
    "fit-fusion": cmd_fit_fusion,
}


def _read(reader, path):
    try:
        return reader(path)
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    except DimMismatch:
        raise
    except (ValueError, KeyError, IndexError) as exc:
        raise ConfigError(f"malformed file {path}: {exc}") from exc


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cocoloss", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, parents=[common])
        for key in schema:
            if key == "seed":
                continue
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IOFailure as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteLoss as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except DimMismatch as exc:
        print(f"dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_DIM
    except UniverseMismatch as exc:
        print(f"instance mismatch: {exc}", file=sys.stderr)
        return EXIT_UNIVERSE
    except NoPairs as exc:
        print(f"no pairs: {exc}", file=sys.stderr)
        return EXIT_NOPAIRS
    except Degenerate as exc:
        print(f"degenerate fit: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
