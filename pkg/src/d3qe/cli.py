"""Command-line entry point: ``d3qe <subcommand> [options]``.

Options can also come from a TOML file (``--config``); flags override file
keys. Exit codes: 0 success, 1 usage/config error, 2 data/format error.
"""

import argparse
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .data import (
    PerturbationSpec,
    SyntheticDataSpec,
    build_synthetic_tokenizer,
    generate_synthetic_dataset,
    load_image_dataset,
    read_dataset_meta,
    write_synthetic_dataset,
)
from .detector import DetectorModel, ModelConfig, SemanticProvider
from .errors import ConfigError, D3QEError
from .evaluation import evaluate_dataset, export_activation_heatmap, robustness_sweep
from .training import TrainConfig, load_checkpoint, run_training, save_checkpoint

# config key -> (type, default); flag spelling is the key with "_" -> "-"
SETTINGS = {
    "seed": (int, 0),
    "out": (str, None),
    "data": (str, None),
    "checkpoint": (str, None),
    "report": (str, None),
    "manifest": (str, None),
    "val_manifest": (str, None),
    "features": (str, None),
    "feature_manifest": (str, None),
    "N": (int, 512),
    "c": (int, 8),
    "p": (int, 8),
    "H": (int, 64),
    "W": (int, 64),
    "d": (int, 512),
    "L": (int, 2),
    "lr": (float, 1e-4),
    "wd": (float, 0.01),
    "batch": (int, 32),
    "epochs": (int, 10),
    "d_s": (int, 512),
    "d_e": (int, 256),
    "zipf_s": (float, 1.2),
    "top_k": (int, None),
    "noise": (float, 0.01),
    "n_train": (int, 4000),
    "n_val": (int, 1000),
    "n_test": (int, 1000),
    "split": (str, "test"),
    "kind": (str, None),
    "quality": (int, None),
    "factor": (float, None),
    "grid": (str, None),
    "first_m": (int, 256),
    "distribution_bias": (bool, True),
}

COMMON = ("seed",)
COMMANDS = {
    "gen-data": ("out", "N", "c", "p", "H", "W", "zipf_s", "top_k", "noise", "n_train", "n_val", "n_test"),
    "train": ("data", "manifest", "val_manifest", "out", "report", "features", "feature_manifest",
              "N", "c", "p", "H", "W", "d", "L", "lr", "wd", "batch", "epochs", "d_s", "d_e",
              "distribution_bias"),
    "eval": ("checkpoint", "data", "manifest", "split", "report", "features", "feature_manifest",
             "N", "c", "p", "H", "W", "kind", "quality", "factor"),
    "sweep": ("checkpoint", "data", "manifest", "split", "report", "features", "feature_manifest",
              "N", "c", "p", "H", "W", "kind", "grid"),
    "heatmap": ("checkpoint", "out", "first_m"),
    "inspect-checkpoint": ("checkpoint",),
}
HELP = {
    "gen-data": "write a synthetic long-tail vs. top-k dataset (PNG + TSV manifests)",
    "train": "train a detector and save the best-validation checkpoint",
    "eval": "evaluate a checkpoint, optionally under one perturbation",
    "sweep": "evaluate a checkpoint across a grid of JPEG qualities or crop factors",
    "heatmap": "export codebook activation heatmaps (CSV) from a checkpoint's trackers",
    "inspect-checkpoint": "print a checkpoint's header, tensor shapes and tracker totals",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _flag(key):
    return "--" + key.replace("_", "-")


def build_parser():
    parser = _Parser(prog="d3qe", description="Codebook-discrepancy detector for autoregressive images.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="TOML file with default values for any option below")
        for key in COMMON + keys:
            typ, default = SETTINGS[key]
            default = "N/8" if key == "top_k" else default
            if typ is bool:
                p.add_argument(_flag(key), dest=key, action=argparse.BooleanOptionalAction, default=None,
                               help=f"(default: {default})")
            else:
                p.add_argument(_flag(key), dest=key, type=typ, default=None, metavar=key.upper(),
                               help=f"(default: {default})")
    return parser


def resolve(args):
    """Merge flags over TOML keys over built-in defaults."""
    allowed = COMMON + COMMANDS[args.command]
    file_values = {}
    if args.config:
        try:
            with open(args.config, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
        for key, value in raw.items():
            norm = key.replace("-", "_")
            if norm not in SETTINGS:
                raise ConfigError(f"{args.config}: unknown key {key!r}")
            if norm in allowed:
                typ = SETTINGS[norm][0]
                if typ is float and isinstance(value, int) and not isinstance(value, bool):
                    value = float(value)
                if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
                    raise ConfigError(f"{args.config}: {key} must be of type {typ.__name__}")
                file_values[norm] = value
    out = {}
    for key in allowed:
        flag = getattr(args, key)
        out[key] = flag if flag is not None else file_values.get(key, SETTINGS[key][1])
    return out


def _require(opts, *keys):
    for key in keys:
        if opts.get(key) is None:
            raise ConfigError(f"missing required option {_flag(key)}")


def _write_text(path, text):
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _data_spec(opts, **overrides):
    values = dict(num_codes=opts["N"], channels=opts["c"], patch_size=opts["p"],
                  height=opts["H"], width=opts["W"])
    for key in ("zipf_s", "top_k", "noise", "n_train", "n_val", "n_test"):
        if opts.get(key) is not None:
            values["noise_sigma" if key == "noise" else key] = opts[key]
    values.update(overrides)
    return SyntheticDataSpec(**values)


def _provider(opts, dim):
    if opts.get("features") or opts.get("feature_manifest"):
        _require(opts, "features", "feature_manifest")
        return SemanticProvider.from_feature_file(opts["features"], opts["feature_manifest"], dim)
    return None


def _load_split(opts, split, dims, manifest_key="manifest"):
    """SampleSet from an explicit manifest, else ``<data>/<split>.tsv``."""
    if opts.get(manifest_key):
        return load_image_dataset(opts[manifest_key], size=dims)
    if opts.get("data"):
        return load_image_dataset(os.path.join(opts["data"], f"{split}.tsv"), size=dims)
    raise ConfigError(f"no data for the {split} split: pass --data or {_flag(manifest_key)}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(opts):
    _require(opts, "out")
    spec = _data_spec(opts)
    _, splits = generate_synthetic_dataset(spec, opts["seed"])
    write_synthetic_dataset(opts["out"], spec, opts["seed"], splits)
    print(f"wrote {sum(len(s) for s in splits.values())} images to {opts['out']}", file=sys.stderr)
    return 0


def _tokenizer_for(opts):
    """Tokenizer and data seed: from a gen-data directory when given, else from flags."""
    if opts.get("data"):
        seed, spec = read_dataset_meta(opts["data"])
        return build_synthetic_tokenizer(seed, spec), spec
    spec = _data_spec(opts, n_train=0, n_val=0, n_test=0)
    return build_synthetic_tokenizer(opts["seed"], spec), spec


def cmd_train(opts):
    _require(opts, "out")
    tokenizer, spec = _tokenizer_for(opts)
    dims = (spec.height, spec.width)
    train = _load_split(opts, "train", dims)
    val = (_load_split(opts, "val", dims, "val_manifest")
           if opts.get("data") or opts.get("val_manifest") else None)
    config = ModelConfig(num_codes=spec.num_codes, channels=spec.channels, patch_size=spec.patch_size,
                         height=spec.height, width=spec.width, hidden=opts["d"], layers=opts["L"],
                         semantic_dim=opts["d_s"], embed_dim=opts["d_e"],
                         use_distribution_bias=opts["distribution_bias"],
                         semantic_mode="file" if opts.get("features") else "random", seed=opts["seed"])
    provider = _provider(opts, opts["d_s"]) or SemanticProvider.random_projection(opts["seed"], opts["d_s"])
    model = DetectorModel(config, tokenizer.encoder, tokenizer.codebook, provider)
    tcfg = TrainConfig(lr=opts["lr"], weight_decay=opts["wd"], batch_size=opts["batch"],
                       epochs=opts["epochs"], seed=opts["seed"])

    def log(m):
        val_txt = "" if m.val_accuracy is None else f" val_acc={m.val_accuracy:.4f} val_ap={m.val_ap:.4f}"
        print(f"epoch {m.epoch}: loss={m.loss:.5f} train_acc={m.train_accuracy:.4f}{val_txt}", file=sys.stderr)

    result = run_training(model, train, val, tcfg, log=log)
    save_checkpoint(result.model, opts["out"], tcfg)
    summary = {"schema": 1, "checkpoint": opts["out"], "seed": opts["seed"],
               "model": config.to_dict(), "train": vars_of(tcfg), **result.to_dict()}
    _write_text(opts.get("report"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


def vars_of(dc):
    return {k: getattr(dc, k) for k in dc.__dataclass_fields__}


def _expected_dims(opts, explicit):
    names = {"N": "num_codes", "c": "channels", "p": "patch_size", "H": "height", "W": "width"}
    return {names[k]: opts[k] for k in names if k in explicit}


def _load_model(opts, explicit):
    _require(opts, "checkpoint")
    expect = _expected_dims(opts, explicit)
    if opts.get("data"):
        _, spec = read_dataset_meta(opts["data"])
        expect.update(num_codes=spec.num_codes, channels=spec.channels, patch_size=spec.patch_size,
                      height=spec.height, width=spec.width)
    provider = _provider(opts, None)
    return load_checkpoint(opts["checkpoint"], provider=provider, expect=expect)


def _eval_config(model, opts):
    return {"model": model.config.to_dict(), "checkpoint": opts["checkpoint"], "split": opts["split"],
            "data": opts.get("data"), "manifest": opts.get("manifest"), "epoch": model.epoch}


def cmd_eval(opts, explicit):
    model = _load_model(opts, explicit)
    data = _load_split(opts, opts["split"], (model.config.height, model.config.width))
    pert = None
    if opts.get("kind"):
        pert = PerturbationSpec(opts["kind"], quality=opts.get("quality"), factor=opts.get("factor"))
    report = evaluate_dataset(model, data, pert, _eval_config(model, opts), opts["seed"])
    _write_text(opts.get("report"), report.to_json())
    return 0


def cmd_sweep(opts, explicit):
    _require(opts, "kind", "grid")
    try:
        grid = [float(v) for v in opts["grid"].split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--grid must be a comma-separated list of numbers, got {opts['grid']!r}") from None
    model = _load_model(opts, explicit)
    data = _load_split(opts, opts["split"], (model.config.height, model.config.width))
    reports = robustness_sweep(model, data, opts["kind"], grid, config=_eval_config(model, opts), seed=opts["seed"])
    text = json.dumps({"schema": 1, "reports": [r.to_dict() for r in reports]}, indent=2, sort_keys=True) + "\n"
    _write_text(opts.get("report"), text)
    return 0


def cmd_heatmap(opts):
    _require(opts, "checkpoint", "out")
    model = load_checkpoint(opts["checkpoint"])
    export_activation_heatmap(model.real_tracker, model.fake_tracker, opts["first_m"], opts["out"])
    print(f"wrote heatmap CSVs to {opts['out']}", file=sys.stderr)
    return 0


def cmd_inspect(opts):
    _require(opts, "checkpoint")
    model = load_checkpoint(opts["checkpoint"])
    info = {"config": model.config.to_dict(), "epoch": model.epoch,
            "snapshot_epoch": model.delta.epoch,
            "tensors": {name: list(p.shape) for name, p in model.named_parameters()},
            "parameter_count": int(sum(p.data.size for p in model.parameters())),
            "tracker_totals": {"real": int(model.real_tracker.total), "fake": int(model.fake_tracker.total)},
            "delta_range": [float(np.min(model.delta.values)), float(np.max(model.delta.values))]}
    sys.stdout.write(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return 0


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    explicit = {k for k, v in vars(args).items() if v is not None}
    try:
        opts = resolve(args)
        if args.command == "gen-data":
            return cmd_gen_data(opts)
        if args.command == "train":
            return cmd_train(opts)
        if args.command == "eval":
            return cmd_eval(opts, explicit)
        if args.command == "sweep":
            return cmd_sweep(opts, explicit)
        if args.command == "heatmap":
            return cmd_heatmap(opts)
        return cmd_inspect(opts)
    except ConfigError as exc:
        print(f"d3qe {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (D3QEError, OSError) as exc:
        print(f"d3qe {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
