"""Command-line entry point: prepare / train / eval / probe / plot.

Every run writes a manifest (command, config, seed, output dir, input hashes)
sufficient to reproduce it.  Exit codes: 0 success, 2 usage or configuration
error, 1 runtime failure.
"""

import argparse
import copy
import hashlib
import json
import os
import sys

import numpy as np

from .detector import DetectorConfig, build_detector, load_checkpoint, save_checkpoint
from .dropout import DropoutConfig
from .evaluation import Scenario, evaluate_scenario, token_probe, write_embedding_csv
from .events import EventStream, integrate_events
from .lidar import LidarCloud, project_lidar_to_image
from .manifest import NormalizationConfig, load_coco_manifest, write_dataset
from .synthetic import SyntheticConfig, synth_toy_dataset
from .training import TrainConfig, TrainStage, make_optimizer, train_stage, write_history_csv
from .types import ConfigurationError, IngestionError, Modality

MANIFEST_SCHEMA = 1


def default_config() -> dict:
    return {
        "model": DetectorConfig().to_dict(),
        "train": {
            "stage": "multimodal",
            "iterations": 1000,
            "base_lr": 2e-3,
            "warmup_iters": 100,
            "decay_milestones": [700, 900],
            "weight_decay": 1e-4,
            "dropout": {"p": 0.3, "rng_seed": 0},
            "seed": 0,
            "batch_size": 8,
            "grad_clip": 1.0,
        },
        "data": {
            "synthetic": {
                "n_train": 240,
                "n_test": 60,
                "image_size": [64, 64],
                "frac_dark": 0.35,
                "frac_cold": 0.35,
                "seed": 0,
            },
            "normalization": {"rgb_mean": [0.0, 0.0, 0.0], "rgb_std": [1.0, 1.0, 1.0]},
        },
    }


def _deep_update(base: dict, extra: dict) -> dict:
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], val)
        else:
            base[key] = val
    return base


def _set_dotted(cfg: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            node[k] = {}
        node = node[k]
    try:
        node[keys[-1]] = json.loads(raw)
    except json.JSONDecodeError:
        node[keys[-1]] = raw


def load_config(path: str | None, overrides=()) -> dict:
    cfg = default_config()
    if path:
        if not os.path.exists(path):
            raise ConfigurationError(f"config file not found: {path}")
        with open(path) as fh:
            _deep_update(cfg, json.load(fh))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        _set_dotted(cfg, key, val)
    return cfg


def _train_config(cfg: dict, args) -> TrainConfig:
    t = copy.deepcopy(cfg["train"])
    drop = t.pop("dropout", {})
    if args.dropout_p is not None:
        drop["p"] = args.dropout_p
    if args.seed is not None:
        t["seed"] = args.seed
    if getattr(args, "stage", None):
        t["stage"] = args.stage
    if getattr(args, "iterations", None):
        t["iterations"] = args.iterations
    t["decay_milestones"] = tuple(t.get("decay_milestones", ()))
    return TrainConfig(dropout=DropoutConfig(**drop), **t)


def _synthetic_config(cfg: dict, seed: int | None) -> SyntheticConfig:
    d = copy.deepcopy(cfg["data"]["synthetic"])
    d["image_size"] = tuple(d.get("image_size", (64, 64)))
    if seed is not None:
        d["seed"] = seed
    return SyntheticConfig(**d)


def _resolve_dataset(cfg: dict, args, split: str):
    if getattr(args, "data", None):
        manifest = os.path.join(args.data, "manifest.json")
        if not os.path.exists(manifest):
            raise ConfigurationError(f"manifest not found: {manifest}")
        norm = NormalizationConfig(
            rgb_mean=tuple(cfg["data"]["normalization"]["rgb_mean"]),
            rgb_std=tuple(cfg["data"]["normalization"]["rgb_std"]),
        )
        return load_coco_manifest(manifest, norm)
    train, test = synth_toy_dataset(_synthetic_config(cfg, getattr(args, "seed", None)))
    return train if split == "train" else test


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_run_manifest(out_dir: str, args, inputs: list[str]) -> None:
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "command": args.command,
        "argv": sys.argv[1:],
        "config": getattr(args, "config", None),
        "seed": getattr(args, "seed", None),
        "out": out_dir,
        "input_hashes": {p: _sha256(p) for p in inputs if p and os.path.exists(p)},
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def cmd_prepare(args) -> int:
    cfg = load_config(args.config, args.set)
    out = args.out or os.path.join(os.environ.get("MMFUSE_CACHE", "."), "prepared")
    os.makedirs(out, exist_ok=True)
    inputs = [args.config]
    if args.synthetic:
        train, test = synth_toy_dataset(_synthetic_config(cfg, args.seed))
        write_dataset(os.path.join(out, "train"), train.samples, train.kinds)
        write_dataset(os.path.join(out, "test"), test.samples, test.kinds)
    elif args.events:
        if not os.path.exists(args.events):
            raise ConfigurationError(f"events file not found: {args.events}")
        inputs.append(args.events)
        h, w = (int(v) for v in args.sensor_shape.split("x"))
        stream = EventStream.from_csv(args.events, (h, w))
        if len(stream) == 0:
            raise IngestionError(f"no events parsed from {args.events}")
        t0 = int(stream.t.min())
        t1 = int(stream.t.max()) + 1
        for i, start in enumerate(range(t0, t1, args.window)):
            plane = integrate_events(stream, start, start + args.window)
            np.save(os.path.join(out, f"event_{i:04d}.npy"), plane)
    elif args.lidar:
        if not os.path.exists(args.lidar):
            raise ConfigurationError(f"lidar file not found: {args.lidar}")
        inputs.append(args.lidar)
        fx, fy, cx, cy = (float(v) for v in args.intrinsics.split(","))
        h, w = (int(v) for v in args.out_shape.split("x"))
        cloud = LidarCloud.from_csv(args.lidar, (fx, fy, cx, cy))
        np.save(os.path.join(out, "lidar_depth.npy"), project_lidar_to_image(cloud, (h, w)))
    else:
        raise ConfigurationError("prepare needs one of --synthetic, --events, --lidar")
    write_run_manifest(out, args, inputs)
    print(f"prepared artifacts in {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    tc = _train_config(cfg, args)
    if tc.stage is TrainStage.MULTIMODAL and not args.init_from and not args.from_scratch:
        raise ConfigurationError(
            "multimodal stage requires --init-from <checkpoint> or --from-scratch"
        )
    out = args.out or "run"
    os.makedirs(out, exist_ok=True)
    start_iteration = 0
    optimizer = None
    if args.init_from:
        if not os.path.exists(args.init_from):
            raise ConfigurationError(f"checkpoint not found: {args.init_from}")
        model, start_iteration, optimizer = load_checkpoint(
            args.init_from, optimizer_factory=lambda m: make_optimizer(m, tc)
        )
        if not args.resume:
            start_iteration = 0
            optimizer = None
    else:
        model = build_detector(DetectorConfig.from_dict(cfg["model"]), seed=tc.seed)
    if optimizer is None:
        optimizer = make_optimizer(model, tc)
    dataset = _resolve_dataset(cfg, args, "train")
    result = train_stage(
        model, dataset, tc, start_iteration, optimizer, log_every=args.log_every
    )
    ckpt = os.path.join(out, "checkpoint.npz")
    save_checkpoint(result.model, ckpt, result.final_iteration, optimizer)
    write_history_csv(result.history, os.path.join(out, "history.csv"))
    write_run_manifest(out, args, [args.config, args.init_from])
    print(
        f"trained {tc.iterations} iterations (stage {tc.stage.value}); "
        f"checkpoint at {ckpt}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    if not os.path.exists(args.checkpoint):
        raise ConfigurationError(f"checkpoint not found: {args.checkpoint}")
    model, _, _ = load_checkpoint(args.checkpoint)
    dataset = _resolve_dataset(cfg, args, "test")
    scenario = Scenario.parse(args.scenario)
    report = evaluate_scenario(model, dataset, scenario)
    out = args.out or "eval"
    os.makedirs(out, exist_ok=True)
    name = args.scenario.replace(":", "_")
    with open(os.path.join(out, f"report_{name}.json"), "w") as fh:
        fh.write(report.to_json(indent=1))
    write_run_manifest(out, args, [args.config, args.checkpoint])
    print(report.to_json())
    return 0


def cmd_probe(args) -> int:
    cfg = load_config(args.config, args.set)
    if not os.path.exists(args.checkpoint):
        raise ConfigurationError(f"checkpoint not found: {args.checkpoint}")
    model, _, _ = load_checkpoint(args.checkpoint)
    dataset = _resolve_dataset(cfg, args, "test")
    samples = list(dataset)
    if args.expand_combinations:
        from .dropout import mask_to_modalities

        expanded = []
        for s in samples:
            mods = s.valid_modalities()
            for combo in _nonempty_subsets(mods):
                expanded.append(mask_to_modalities(s, combo))
        samples = expanded
    report = token_probe(model, samples, seed=args.seed or 0)
    out = args.out or "probe"
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "probe_report.json"), "w") as fh:
        fh.write(report.to_json(indent=1))
    write_embedding_csv(report, os.path.join(out, "embedding.csv"))
    write_run_manifest(out, args, [args.config, args.checkpoint])
    print(report.to_json())
    return 0


def _nonempty_subsets(mods):
    out = []
    n = len(mods)
    for mask in range(1, 1 << n):
        out.append([mods[i] for i in range(n) if mask >> i & 1])
    return out


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = args.out or "plot.png"
    if args.history:
        if not os.path.exists(args.history):
            raise ConfigurationError(f"history file not found: {args.history}")
        rows = []
        with open(args.history) as fh:
            header = fh.readline().strip().split(",")
            for line in fh:
                rows.append(dict(zip(header, (float(v) for v in line.strip().split(",")))))
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([r["iteration"] for r in rows], [r["total"] for r in rows])
        ax.set_xlabel("iteration")
        ax.set_ylabel("total loss")
        fig.tight_layout()
        fig.savefig(out, dpi=120)
    elif args.embedding:
        if not os.path.exists(args.embedding):
            raise ConfigurationError(f"embedding file not found: {args.embedding}")
        combos: dict[str, list] = {}
        with open(args.embedding) as fh:
            fh.readline()
            for line in fh:
                sid, combo, x, y = line.strip().split(",")
                combos.setdefault(combo, []).append((float(x), float(y)))
        fig, ax = plt.subplots(figsize=(5, 5))
        for combo, pts in sorted(combos.items()):
            arr = np.array(pts)
            ax.scatter(arr[:, 0], arr[:, 1], s=12, label=combo)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out, dpi=120)
    else:
        raise ConfigurationError("plot needs --history or --embedding")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmfuse")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("prepare", help="generate dataset artifacts")
    common(p)
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--events", default=None)
    p.add_argument("--window", type=int, default=20000, help="event window, microseconds")
    p.add_argument("--sensor-shape", default="480x640")
    p.add_argument("--lidar", default=None)
    p.add_argument("--intrinsics", default="100,100,32,24", help="fx,fy,cx,cy")
    p.add_argument("--out-shape", default="48x64")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--stage", choices=[s.value for s in TrainStage], default=None)
    p.add_argument("--init-from", default=None)
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--resume", action="store_true", help="continue schedule from checkpoint")
    p.add_argument("--dropout-p", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--data", default=None, help="prepared dataset dir (default: synthetic)")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a scenario")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", default="multimodal", help="multimodal | unimodal:<modality>")
    p.add_argument("--data", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="fuser/abstractor modality-awareness probe")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument(
        "--expand-combinations",
        action="store_true",
        help="probe every non-empty modality subset of each sample",
    )
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("plot", help="figures from history / embedding files")
    common(p)
    p.add_argument("--history", default=None)
    p.add_argument("--embedding", default=None)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, IngestionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
