"""``neuronet`` command line: gen-data, train, infer, evaluate, selftest, benchmark.

Exit codes: 0 ok, 1 selftest failure, 2 configuration or usage error,
3 IO or format error, 4 numeric abort.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field

from . import __version__
from ._threads import configure_threads
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (ConfigurationError, DataError, FormatError, InputError, NumericError,
                     PipelineError, UsageError)
from .graph import DecoderSpec, EncoderConfig, ModelConfig, build_model, reference_config
from .training import TrainConfig, train
from .volume_io import load_manifest, load_subject

log = logging.getLogger("neuronet")

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


@dataclass
class PathsConfig:
    manifest: str = "data/manifest.json"
    out_dir: str = "run"
    checkpoint: str = None          # optional warm start


@dataclass
class ModeConfig:
    train_split: str = "train"
    validation_split: str = None


@dataclass
class RunConfig:
    """Everything a training run needs; ``model.decoders`` may be null to take
    every protocol of the manifest."""

    model: dict = field(default_factory=lambda: {
        "encoder": EncoderConfig(3, 2, (1, 2, 2), (8, 16, 32)).to_dict(), "decoders": None, "seed": 0})
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        total_steps=2000, crop_size=(24, 24, 24), checkpoint_interval=500))
    paths: PathsConfig = field(default_factory=PathsConfig)
    mode: ModeConfig = field(default_factory=ModeConfig)

    @classmethod
    def from_dict(cls, data):
        def pick(sub_cls, raw, where):
            known = {f.name for f in dataclasses.fields(sub_cls)}
            unknown = sorted(set(raw) - known)
            if unknown:
                raise ConfigurationError(f"unknown keys in {where}: {', '.join(unknown)}")
            return sub_cls(**raw)

        if not isinstance(data, dict):
            raise ConfigurationError("run config must be a JSON object")
        unknown = sorted(set(data) - {"model", "train", "paths", "mode"})
        if unknown:
            raise ConfigurationError(f"unknown keys in run config: {', '.join(unknown)}")
        base = cls()
        model = dict(base.model)
        raw_model = data.get("model", {})
        extra = sorted(set(raw_model) - {"encoder", "decoders", "seed"})
        if extra:
            raise ConfigurationError(f"unknown keys in model config: {', '.join(extra)}")
        model.update(raw_model)
        model["encoder"] = EncoderConfig.from_dict(model["encoder"]).to_dict()
        if model["decoders"] is not None:
            model["decoders"] = [DecoderSpec.from_dict(d).to_dict() for d in model["decoders"]]
            ModelConfig.from_dict(model)     # duplicate names and the like
        train_cfg = TrainConfig.from_dict({**base.train.to_dict(), **data.get("train", {})})
        return cls(model=model, train=train_cfg,
                   paths=pick(PathsConfig, {**dataclasses.asdict(base.paths), **data.get("paths", {})}, "paths"),
                   mode=pick(ModeConfig, {**dataclasses.asdict(base.mode), **data.get("mode", {})}, "mode"))

    def to_dict(self):
        return {"model": self.model, "train": self.train.to_dict(),
                "paths": dataclasses.asdict(self.paths), "mode": dataclasses.asdict(self.mode)}

    def model_config(self, manifest):
        model = dict(self.model)
        if model["decoders"] is None:
            model["decoders"] = [{"protocol_name": n, "n_classes": c} for n, c in manifest.protocols.items()]
        config = ModelConfig.from_dict(model)
        for spec in config.decoders:
            if spec.protocol_name not in manifest.protocols:
                raise ConfigurationError(f"protocol {spec.protocol_name!r} is not in the manifest")
            if manifest.protocols[spec.protocol_name] != spec.n_classes:
                raise ConfigurationError(
                    f"protocol {spec.protocol_name!r}: config says {spec.n_classes} classes, "
                    f"manifest says {manifest.protocols[spec.protocol_name]}")
        return config


def _read_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{what} {path}: invalid JSON ({exc})") from exc


def load_run_config(path):
    cfg = RunConfig.from_dict(_read_json(path, "config"))
    base = os.path.dirname(os.path.abspath(path))
    # relative paths are taken relative to the config file
    for name in ("manifest", "out_dir", "checkpoint"):
        value = getattr(cfg.paths, name)
        if value and not os.path.isabs(value):
            setattr(cfg.paths, name, os.path.join(base, value))
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    from .phantom import PhantomSpec, generate_dataset
    spec = PhantomSpec.from_dict(_read_json(args.spec, "phantom spec")) if args.spec else PhantomSpec()
    splits = None
    if args.split:
        splits = {}
        for part in args.split.split(","):
            tag, _, count = part.partition("=")
            if tag not in ("train", "val", "test") or not count.isdigit():
                raise ConfigurationError(f"bad --split entry {part!r}; expected e.g. train=10,test=5")
            splits[tag] = int(count)
    manifest = generate_dataset(spec, args.subjects, args.seed, args.out, splits)
    print(f"wrote {len(manifest.subjects)} subjects, {len(manifest.protocols)} protocols to {args.out}")
    return EXIT_OK


def cmd_train(args):
    if args.print_config:
        raw = _read_json(args.config, "config") if args.config else {}
        print(json.dumps(RunConfig.from_dict(raw).to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if not args.config:
        raise UsageError("train needs --config (use --print-config for a template)")
    cfg = load_run_config(args.config)
    manifest = load_manifest(cfg.paths.manifest)
    model_config = cfg.model_config(manifest)
    cfg.train.validate_for(model_config)
    if cfg.paths.checkpoint:
        params = load_checkpoint(cfg.paths.checkpoint)
        if params.config.canonical_json() != model_config.canonical_json():
            raise ConfigurationError("warm-start checkpoint does not match the configured model")
    else:
        params = build_model(model_config)
    protocols = model_config.protocols
    records = manifest.split(cfg.mode.train_split)
    if not records:
        raise ConfigurationError(f"manifest has no subjects in split {cfg.mode.train_split!r}")
    subjects = [load_subject(manifest, r, protocols) for r in records]
    validation = None
    if cfg.mode.validation_split:
        validation = [load_subject(manifest, r, protocols) for r in manifest.split(cfg.mode.validation_split)]
    os.makedirs(cfg.paths.out_dir, exist_ok=True)
    with open(os.path.join(cfg.paths.out_dir, "run_config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    result = train(params, subjects, cfg.train, out_dir=cfg.paths.out_dir, validation=validation,
                   log_path=os.path.join(cfg.paths.out_dir, "train_log.ndjson"))
    last = result.records[-1] if result.records else None
    print(f"trained {cfg.train.total_steps} steps; final total loss "
          f"{last.total:.6f}" if last else "trained 0 steps")
    print(f"checkpoint: {result.checkpoints[-1]}")
    return EXIT_OK


def cmd_infer(args):
    from .evaluation import infer_file
    params = load_checkpoint(args.checkpoint)
    tile = tuple(args.tile) if args.tile else None
    paths = infer_file(params, args.image, args.out, subject=args.subject, tile=tile)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_evaluate(args):
    from .evaluation import evaluate
    params = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    report = evaluate(params, manifest, args.split, tuple(args.tile) if args.tile else None)
    paths = report.write(args.out)
    sys.stdout.write(report.table())
    print(f"report: {paths['txt']}, {paths['json']}, {paths['ndjson']}")
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import main
    return EXIT_OK if main(seed=args.seed, perturb=args.perturb) == 0 else EXIT_SELFTEST


def cmd_benchmark(args):
    import tempfile
    import numpy as np
    from .evaluation import benchmark_inference
    from .volume_io import Volume, write_volume
    with tempfile.TemporaryDirectory() as tmp:
        ckpt = args.checkpoint
        if ckpt is None:
            ckpt = os.path.join(tmp, "reference.nnckpt")
            save_checkpoint(build_model(reference_config(args.seed)), ckpt)
        image = args.image
        if image is None:
            image = os.path.join(tmp, "volume.nnvol")
            rng = np.random.default_rng(args.seed)
            write_volume(Volume(rng.standard_normal((args.extent,) * 3).astype(np.float32)), image)
        report = benchmark_inference(ckpt, image, repeats=args.repeats, note=args.note)
    sys.stdout.write(report.summary())
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="neuronet", description="Multi-output 3-D brain segmentation.")
    parser.add_argument("--version", action="version", version=f"neuronet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--spec", help="phantom spec JSON (defaults built in)")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", help="split counts, e.g. train=10,test=5 (default: all train)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subject", help="output name prefix (default: image file stem)")
    p.add_argument("--tile", type=int, nargs=3, help="sliding-window tile extents (default: whole volume)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="Dice report over a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", default="evaluation")
    p.add_argument("--tile", type=int, nargs=3)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selftest", help="run the oracle checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb", action="append", default=[], help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("benchmark", help="time end-to-end inference")
    p.add_argument("--checkpoint", help="defaults to a freshly initialised reference network")
    p.add_argument("--image", help="defaults to a random volume of --extent")
    p.add_argument("--extent", type=int, default=64)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--note", help="hardware note to print verbatim")
    p.add_argument("--json", help="also write the timing report here")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    configure_threads()
    try:
        return args.func(args)
    except (ConfigurationError, UsageError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DataError, PipelineError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"error: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
