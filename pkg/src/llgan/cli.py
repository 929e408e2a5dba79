"""``llgan`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 config or data error, 3 runtime
failure (training, evaluation or a failing selftest).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("llgan")


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


DATA_DEFAULTS = {"n": 64, "styles": 10, "image_size": 282, "eval_fraction": 0.1}
EVAL_DEFAULTS = {"n": 512, "threshold": 0.75, "embedder_epochs": 50, "batch": 16}
DETECTOR_EXTRA = {"time_budget": 480.0}


def _coerce(value: str, like: Any, key: str):
    try:
        if isinstance(like, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float) or like is None:
            return None if value.strip().lower() in ("", "none") else float(value)
        if isinstance(like, tuple):
            return tuple(float(v) for v in value.replace(",", " ").split())
        return value
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from exc


def _merge(defaults: dict, cp: configparser.ConfigParser | None, section: str) -> dict:
    out = dict(defaults)
    if cp is not None and cp.has_section(section):
        for key, raw in cp.items(section):
            if key not in defaults:
                raise ConfigError(f"unknown key {key!r} in [{section}]; valid: {', '.join(sorted(defaults))}")
            out[key] = _coerce(raw, defaults[key], f"{section}.{key}")
    return out


def _dataclass_defaults(cls) -> dict:
    return {f.name: f.default if f.default is not dataclasses.MISSING else f.default_factory()
            for f in dataclasses.fields(cls)}


def _read_config(path: str | None) -> configparser.ConfigParser | None:
    if not path:
        return None
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return cp


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file with [data], [detector], [train], [eval] sections")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="llgan", description="Logo generation with a style-guided GAN.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="render a synthetic logo dataset")
    s.add_argument("--n", type=int)

    s = sub.add_parser("train-detector", parents=[common], help="train the logo detector")
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--time-budget", type=float, help="seconds")

    for name, text in (("train-dcgan", "pretrain the DCGAN+ generator"),
                       ("train-llgan", "fine-tune with the style loss")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--data", required=True)
        s.add_argument("--epochs", type=int)
        s.add_argument("--batch", type=int)
        s.add_argument("--channel-scale", type=float)
        s.add_argument("--max-steps", type=int)
        s.add_argument("--resume", action="store_true", help="continue from OUT/latest if present")
        if name == "train-llgan":
            s.add_argument("--detector", required=True, help="detector checkpoint directory")
            s.add_argument("--init", help="DCGAN+ checkpoint to start from")
            s.add_argument("--variant", choices=["base", "frcnn", "boxes", "backbone", "full"], default="base")
            s.add_argument("--lambda-s", type=float)

    s = sub.add_parser("generate", parents=[common], help="sample images from a generator checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=16)

    s = sub.add_parser("evaluate", parents=[common], help="FID / IS / detection-rate report")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--detector", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--embedder", help="reuse a saved proxy embedder checkpoint")

    s = sub.add_parser("selftest", help="fast invariant suite")
    s.add_argument("--out", default=None, help="optional directory for selftest.json")
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _echo(out: Path, command: str, seed: int, sections: dict) -> None:
    _write_json(out / "effective_config.json", {"command": command, "seed": seed, **sections})


# subcommands

def cmd_gen_data(args, cp, out: Path) -> int:
    from llgan.dataset import generate_synthetic_dataset

    data = _merge(DATA_DEFAULTS, cp, "data")
    if args.n is not None:
        data["n"] = args.n
    _echo(out, "gen-data", args.seed, {"data": data})
    m = generate_synthetic_dataset(data["n"], out, styles=data["styles"], image_size=data["image_size"],
                                   seed=args.seed, eval_fraction=data["eval_fraction"])
    print(json.dumps({"images": len(m), "train": len(m.subset("train")), "eval": len(m.subset("eval")),
                      "manifest": str(out / "manifest.jsonl")}))
    return EXIT_OK


def cmd_train_detector(args, cp, out: Path) -> int:
    from llgan.dataset import load_samples, read_manifest
    from llgan.detector.train import DetectorTrainConfig, train_detector
    from llgan.metrics import detection_eval
    from llgan.training import save_detector

    defaults = _dataclass_defaults(DetectorTrainConfig)
    defaults.update(DETECTOR_EXTRA)
    defaults["epochs"] = 100
    conf = _merge(defaults, cp, "detector")
    for key, val in (("epochs", args.epochs), ("batch_size", args.batch), ("time_budget", args.time_budget)):
        if val is not None:
            conf[key] = val
    conf["seed"] = args.seed
    _echo(out, "train-detector", args.seed, {"detector": conf, "data": args.data})

    manifest = read_manifest(args.data)
    train, held = load_samples(manifest, "train"), load_samples(manifest, "eval")
    rows = []
    t0 = time.monotonic()
    det = train_detector(train, DetectorTrainConfig(**conf), on_step=lambda step, l: rows.append({"step": step, **l}))
    elapsed = time.monotonic() - t0
    save_detector(out / "detector", det, {"seed": args.seed, "train_seconds": elapsed})
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "rpn_obj", "rpn_box", "roi_cls", "roi_box", "total"])
        w.writeheader()
        w.writerows(rows)

    summary = detection_eval([det.detect(s.image) for s in held], 0.5)
    report = {"held_out_images": len(held), "threshold": 0.5, "detection_rate": summary.detection_rate,
              "tp": summary.tp, "fp": summary.fp, "avg_conf": summary.avg_conf,
              "images_without_detections": summary.images_without_detections,
              "steps": len(rows), "train_seconds": round(elapsed, 1)}
    _write_json(out / "detector_eval.json", report)
    from llgan.plotting import plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("rpn_obj", "rpn_box", "roi_cls", "roi_box", "total"):
        ax.plot([r["step"] for r in rows], [r[key] for r in rows], label=key, lw=1)
    ax.set_xlabel("step")
    ax.legend()
    fig.savefig(out / "losses.png", dpi=100)
    plt.close(fig)
    print(json.dumps(report))
    return EXIT_OK


def cmd_train_gan(args, cp, out: Path, phase: str) -> int:
    from llgan.dataset import load_samples, read_manifest
    from llgan.plotting import plot_losses
    from llgan.training import TrainConfig, run_training

    defaults = _dataclass_defaults(TrainConfig)
    defaults["resume"] = False
    if phase == "llgan":
        defaults["batch_size"] = 16
        defaults["epochs"] = 100
    conf = _merge(defaults, cp, "train")
    conf.update(phase=phase, seed=args.seed, dataset=args.data, checkpoint_dir=str(out))
    if args.resume:
        conf["resume"] = True
    for key, val in (("epochs", args.epochs), ("batch_size", args.batch),
                     ("channel_scale", args.channel_scale), ("max_steps", args.max_steps)):
        if val is not None:
            conf[key] = val
    if phase == "llgan":
        conf["detector_checkpoint"] = args.detector
        if args.init:
            conf["init_checkpoint"] = args.init
        if args.lambda_s is not None:
            conf["lambda_s"] = args.lambda_s
    try:
        cfg = TrainConfig(**conf)
        if phase == "llgan":
            cfg.apply_variant(args.variant)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.init_checkpoint:
        _check_init_shape(cfg)
    _echo(out, f"train-{phase}", args.seed, {"train": dataclasses.asdict(cfg),
                                             "variant": getattr(args, "variant", None)})
    samples = load_samples(read_manifest(args.data), cfg.subset)
    result = run_training(cfg, samples)
    plot_losses(result.log_path, out / "losses.png")
    print(json.dumps({"steps": result.steps, "checkpoint": str(result.checkpoint), "log": str(result.log_path)}))
    return EXIT_OK


def _check_init_shape(cfg) -> None:
    from llgan.checkpoint import read_meta

    g = read_meta(cfg.init_checkpoint).get("generator", {})
    if float(g.get("channel_scale", cfg.channel_scale)) != cfg.channel_scale:
        cfg.channel_scale = float(g["channel_scale"])
        log.info("channel_scale taken from init checkpoint: %s", cfg.channel_scale)


def cmd_generate(args, cp, out: Path) -> int:
    from llgan.dataset import tensor_to_image
    from llgan.metrics import generate_images
    from llgan.plotting import image_grid
    from llgan.training import load_generator

    _echo(out, "generate", args.seed, {"checkpoint": args.checkpoint, "n": args.n})
    G = load_generator(args.checkpoint)
    imgs = generate_images(G, args.n, args.seed)
    (out / "images").mkdir(exist_ok=True)
    for i, img in enumerate(imgs):
        tensor_to_image(img).save(out / "images" / f"{i:05d}.png")
    image_grid(imgs[:16]).save(out / "grid.png")
    print(json.dumps({"images": args.n, "dir": str(out / "images")}))
    return EXIT_OK


def cmd_evaluate(args, cp, out: Path) -> int:
    import torch

    from llgan import checkpoint as ckpt
    from llgan.dataset import load_samples, read_manifest
    from llgan.metrics import EvalReport, ProxyEmbedder, evaluate_generator, train_proxy_embedder
    from llgan.plotting import image_grid, plot_score_histogram
    from llgan.training import load_detector, load_generator

    conf = _merge(EVAL_DEFAULTS, cp, "eval")
    if args.n is not None:
        conf["n"] = args.n
    _echo(out, "evaluate", args.seed, {"eval": conf, "checkpoint": args.checkpoint, "detector": args.detector,
                                       "data": args.data, "embedder": args.embedder})
    manifest = read_manifest(args.data)
    real = load_samples(manifest)
    G = load_generator(args.checkpoint)
    det = load_detector(args.detector)
    if args.embedder:
        arrays, meta = ckpt.load_checkpoint(args.embedder)
        emb = ProxyEmbedder(int(meta["num_classes"]), int(meta["embed_dim"]))
        ckpt.load_module("embedder", emb, arrays)
        emb.eval()
    else:
        torch.manual_seed(args.seed)
        emb = train_proxy_embedder(real, manifest.num_styles, epochs=conf["embedder_epochs"], seed=args.seed)
        ckpt.save_checkpoint(out / "embedder", ckpt.module_arrays("embedder", emb),
                             {"num_classes": manifest.num_styles, "embed_dim": emb.embed.out_features})
    report, fake, dets = evaluate_generator(G, det, emb, real, n=conf["n"], seed=args.seed,
                                            threshold=conf["threshold"])
    report.extras["note"] = "FID uses a small proxy embedder; not comparable to Inception-based FID"
    (out / "report.json").write_text(report.to_json() + "\n")
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EvalReport.CSV_FIELDS)
        w.writeheader()
        w.writerow(report.csv_row())
    plot_score_histogram([d[0].score if d else 0.0 for d in dets], conf["threshold"], out / "scores.png")
    image_grid(fake[:16], boxes=[[x.box for x in d[:1]] for d in dets[:16]]).save(out / "samples.png")
    print(report.to_json())
    return EXIT_OK


def cmd_selftest(args) -> int:
    from llgan.selftest import run_selftest

    report = run_selftest()
    for line in report.lines():
        print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "selftest.json", [dataclasses.asdict(r) for r in report.results])
    return EXIT_OK if report.ok else EXIT_RUNTIME


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "selftest":
        return cmd_selftest(args)

    from llgan.checkpoint import CheckpointError
    from llgan.dataset import DatasetError
    from llgan.diffcore import seed_everything

    if args.threads:
        import torch

        torch.set_num_threads(args.threads)
    out = Path(args.out)
    try:
        cp = _read_config(args.config)
        out.mkdir(parents=True, exist_ok=True)
        seed_everything(args.seed)
        if args.command == "gen-data":
            return cmd_gen_data(args, cp, out)
        if args.command == "train-detector":
            return cmd_train_detector(args, cp, out)
        if args.command in ("train-dcgan", "train-llgan"):
            return cmd_train_gan(args, cp, out, args.command[len("train-"):])
        if args.command == "generate":
            return cmd_generate(args, cp, out)
        return cmd_evaluate(args, cp, out)
    except (ConfigError, DatasetError, CheckpointError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"llgan {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported, mapped to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"llgan {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
