"""Command-line harness: gen-data, search, train, eval, report, export-genotype.

Configuration is resolved as flags > config file (key=value lines) > defaults,
and the fully resolved config is echoed to a manifest so any run can be
reproduced byte for byte by pointing --config at its own manifest.

Exit codes: 0 success, 1 usage error, 2 input error, 3 runtime divergence.
"""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as datamod
from . import device as devmod
from . import genotype as gt
from . import precision as prec
from . import reporting
from . import search as searchmod
from . import trainer
from .blocks import build_network, mac_count, param_count

__all__ = ["main"]


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class ArgParser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise UsageError(message)


def _parse_kv_file(path: Path) -> dict:
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


_BOOL_STRINGS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(key: str, text: str, kind):
    if kind is bool:
        if text.lower() not in _BOOL_STRINGS:
            raise UsageError(f"config key {key}: expected a boolean, got {text!r}")
        return _BOOL_STRINGS[text.lower()]
    try:
        return kind(text)
    except ValueError as exc:
        raise UsageError(f"config key {key}: {exc}") from exc


def _resolve(args, fields: dict) -> dict:
    """flags > config file > defaults, for the given {key: (type, default)}."""
    file_values = {}
    if getattr(args, "config", None):
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise InputError(f"config file not found: {cfg_path}")
        file_values = _parse_kv_file(cfg_path)
    resolved = {}
    for key, (kind, default) in fields.items():
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
        elif key in file_values:
            resolved[key] = _coerce(key, file_values[key], kind)
        else:
            resolved[key] = default
    return resolved


def _manifest_text(command: str, resolved: dict) -> str:
    lines = [f"command={command}"]
    lines += [f"{key}={resolved[key]}" for key in sorted(resolved)]
    return "\n".join(lines) + "\n"


@contextmanager
def _run_lock(directory: Path):
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise InputError(f"run directory {directory} is locked by another process "
                         f"(remove {lock} if stale)")
    try:
        yield
    finally:
        os.close(fd)
        lock.unlink(missing_ok=True)


def _threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        return max(1, args.threads)
    return max(1, int(os.environ.get("LPNAS_THREADS", "1")))


# ---------------------------------------------------------------------------
# field tables (type, default) shared between flags and config files

_SYNTH_FIELDS = {
    "seed": (int, 0),
    "image_size": (int, 32),
    "n_train": (int, 200),
    "n_eval": (int, 50),
    "vessels_min": (int, 0),
    "vessels_max": (int, 3),
    "noise_sigma": (float, 0.05),
}

_GA_FIELDS = {
    "seed": (int, 0),
    "population_size": (int, 16),
    "generations": (int, 10),
    "k_best": (int, 1),
    "n_random": (int, 6),
    "p_mut": (float, 0.15),
    "mating_fraction": (float, 0.5),
}

_FITNESS_FIELDS = {
    "alpha": (float, 0.01),
    "beta": (float, 1.0),
    "gamma": (float, 2.0),
}

_TRAIN_FIELDS = {
    "e_fp32": (int, 10),
    "e_lp": (int, 10),
    "warmup_epochs": (int, 1),
    "batch_size": (int, 32),
    "learning_rate": (float, 1e-3),
    "optimizer": (str, "adam"),
}

_PRECISION_FIELDS = {
    "project_activations": (bool, True),
    "round_weights": (bool, True),
    "clip_bound": (float, 12.0),
    "overflow_policy": (str, "saturate"),
}

_SPACE_FIELDS = {
    "c_max": (int, None),
    "branch": (str, "both"),
}


def _add_fields(parser: argparse.ArgumentParser, fields: dict, skip=()):
    for key, (kind, default) in fields.items():
        if key in skip:
            continue
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            parser.add_argument(flag, action=argparse.BooleanOptionalAction,
                                default=None, help=f"(default {default})")
        else:
            parser.add_argument(flag, type=kind, default=None, help=f"(default {default})")


def _build_configs(resolved: dict):
    try:
        ga = searchmod.GaConfig(
            population_size=resolved["population_size"], generations=resolved["generations"],
            k_best=resolved["k_best"], n_random=resolved["n_random"], p_mut=resolved["p_mut"],
            mating_fraction=resolved["mating_fraction"], seed=resolved["seed"])
        fit = searchmod.FitnessConfig(alpha=resolved["alpha"], beta=resolved["beta"],
                                      gamma=resolved["gamma"])
        train_cfg = trainer.TrainConfig(
            e_fp32=resolved["e_fp32"], e_lp=resolved["e_lp"],
            warmup_epochs=resolved["warmup_epochs"], batch_size=resolved["batch_size"],
            learning_rate=resolved["learning_rate"], optimizer=resolved["optimizer"],
            seed=resolved["seed"])
        pcfg = prec.PrecisionConfig(
            project_activations=resolved["project_activations"],
            round_weights=resolved["round_weights"], clip_bound=resolved["clip_bound"],
            overflow_policy=resolved["overflow_policy"],
            warmup_epochs=resolved["warmup_epochs"])
        space = gt.SearchSpaceConfig(c_max=resolved.get("c_max"))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return ga, fit, train_cfg, pcfg, space


def _load_profile(args) -> devmod.DeviceProfile:
    if getattr(args, "profile", None):
        path = Path(args.profile)
        if not path.is_file():
            raise InputError(f"device profile not found: {path}")
        try:
            return devmod.load_profile(path)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    return devmod.DEFAULT_PROFILE


def _load_data(args) -> tuple:
    root = Path(args.data)
    for sub in ("train", "eval"):
        if not (root / sub / "index.txt").is_file():
            raise InputError(f"dataset directory {root} is missing {sub}/index.txt "
                             "(create it with `lpnas gen-data`)")
    return datamod.load_dataset(root / "train"), datamod.load_dataset(root / "eval")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    resolved = _resolve(args, _SYNTH_FIELDS)
    try:
        cfg = datamod.SyntheticConfig(
            image_size=resolved["image_size"], n_train=resolved["n_train"],
            n_eval=resolved["n_eval"], vessels_min=resolved["vessels_min"],
            vessels_max=resolved["vessels_max"], noise_sigma=resolved["noise_sigma"],
            seed=resolved["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, eval_set = datamod.generate_synthetic(cfg)
    datamod.save_dataset(out / "train", train_set)
    datamod.save_dataset(out / "eval", eval_set)
    (out / "manifest.txt").write_text(_manifest_text("gen-data", resolved), encoding="utf-8")
    print(f"wrote {len(train_set)} train + {len(eval_set)} eval samples to {out}")
    return 0


def _run_one_branch(branch: str, out_dir: Path, space, ga, fit, train_cfg, pcfg,
                    train_set, eval_set, profile, threads: int) -> searchmod.RunHistory:
    out_dir.mkdir(parents=True, exist_ok=True)
    history = searchmod.run_search(space, ga, fit, train_cfg, pcfg, train_set, eval_set,
                                   profile, branch, run_dir=out_dir, threads=threads)
    best = history.best_row
    if best is not None:
        print(f"[{branch}] best genotype: {history.best_code}")
        print(f"[{branch}] params={best.params} fps={best.fps:.2f} "
              f"gpu_miou={best.gpu_miou:.4f} device_miou={best.device_miou:.4f}")
    return history


def cmd_search(args) -> int:
    fields = {**_GA_FIELDS, **_FITNESS_FIELDS, **_TRAIN_FIELDS, **_PRECISION_FIELDS, **_SPACE_FIELDS}
    resolved = _resolve(args, fields)
    branch = resolved["branch"]
    if branch not in ("ptq", "aligned", "both"):
        raise UsageError(f"--branch must be ptq, aligned or both, got {branch!r}")
    ga, fit, train_cfg, pcfg, space = _build_configs(resolved)
    profile = _load_profile(args)
    train_set, eval_set = _load_data(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest_text("search", resolved)
    manifest_path = out / "manifest.txt"
    if manifest_path.is_file() and manifest_path.read_text(encoding="utf-8") != manifest:
        raise InputError(f"{manifest_path} exists with a different configuration; "
                         "use a fresh --out directory or the original config")
    manifest_path.write_text(manifest, encoding="utf-8")
    threads = _threads(args)
    branches = ("ptq", "aligned") if branch == "both" else (branch,)
    with _run_lock(out):
        histories = [
            _run_one_branch(b, out / b, space, ga, fit, train_cfg, pcfg,
                            train_set, eval_set, profile, threads)
            for b in branches
        ]
    if len(histories) == 2:
        report = searchmod.paired_gap_report(histories[0], histories[1])
        print(f"paired gaps: ptq mean={report.mean_gap_ptq:+.5f} "
              f"aligned mean={report.mean_gap_aligned:+.5f} "
              f"recovered={report.recovered_fraction:.3f}")
    return 0


def cmd_train(args) -> int:
    fields = {**_TRAIN_FIELDS, **_PRECISION_FIELDS, "seed": (int, 0)}
    resolved = _resolve(args, fields)
    try:
        train_cfg = trainer.TrainConfig(
            e_fp32=resolved["e_fp32"], e_lp=resolved["e_lp"],
            warmup_epochs=resolved["warmup_epochs"], batch_size=resolved["batch_size"],
            learning_rate=resolved["learning_rate"], optimizer=resolved["optimizer"],
            seed=resolved["seed"])
        pcfg = prec.PrecisionConfig(
            project_activations=resolved["project_activations"],
            round_weights=resolved["round_weights"], clip_bound=resolved["clip_bound"],
            overflow_policy=resolved["overflow_policy"], warmup_epochs=resolved["warmup_epochs"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    genotype = gt.parse(args.genotype)  # GenotypeError -> exit 2 with position
    profile = _load_profile(args)
    train_set, eval_set = _load_data(args)
    resolved["genotype"] = args.genotype
    resolved["finetune"] = bool(args.finetune)

    seeds = np.random.SeedSequence([resolved["seed"], searchmod._TAG_CANDIDATE]).generate_state(2)
    net = build_network(genotype, in_channels=train_set.images.shape[1], seed=int(seeds[0]))
    cfg = replace(train_cfg, seed=int(seeds[1]))
    trainer.train_fp32(net, train_set, cfg)
    if args.finetune:
        trainer.finetune_fp16_aware(net, train_set, cfg, pcfg)
    gpu_miou = trainer.evaluate(net, eval_set, mode="fp32", batch_size=cfg.batch_size)
    meas = devmod.measure(net, eval_set, profile, batch_size=cfg.batch_size)
    print(f"genotype={args.genotype}")
    print(f"params={meas.param_count} macs={mac_count(net, (1,) + train_set.images.shape[1:])} "
          f"fps={meas.fps:.2f} latency_ms={meas.latency_ms:.3f}")
    print(f"gpu_miou={gpu_miou:.4f} device_miou={meas.miou_device:.4f} "
          f"branch={'aligned' if args.finetune else 'ptq'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        manifest = _manifest_text("train", resolved)
        (out / "manifest.txt").write_text(manifest, encoding="utf-8")
        trainer.save_checkpoint(out / "model.ckpt", net,
                                config_hash=trainer.config_hash(manifest))
        print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise InputError(f"checkpoint not found: {ckpt}")
    train_set, eval_set = _load_data(args)
    dataset = train_set if args.split == "train" else eval_set
    net = trainer.restore_network(ckpt, in_channels=dataset.images.shape[1])
    score = trainer.evaluate(net, dataset, mode=args.mode, batch_size=args.batch_size)
    print(f"miou={score:.6f} mode={args.mode} split={args.split} n={len(dataset)}")
    return 0


def cmd_export_genotype(args) -> int:
    if bool(args.checkpoint) == bool(args.run_dir):
        raise UsageError("give exactly one of --checkpoint or --run-dir")
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        if not ckpt.is_file():
            raise InputError(f"checkpoint not found: {ckpt}")
        manifest, _ = trainer.load_checkpoint(ckpt)
        code = manifest["genotype"]
    else:
        best = Path(args.run_dir) / "best_genotype.txt"
        if not best.is_file():
            raise InputError(f"no best_genotype.txt in {args.run_dir}")
        code = best.read_text(encoding="utf-8").strip()
    gt.parse(code)  # guarantee the exported string is valid
    print(code)
    return 0


def cmd_report(args) -> int:
    for d in args.run_dirs:
        if not (Path(d) / "history.csv").is_file():
            raise InputError(f"{d} has no history.csv (not a completed run directory)")
    try:
        written = reporting.render_report(args.run_dirs, args.out)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> ArgParser:
    parser = ArgParser(prog="lpnas",
                       description="Hardware-aware NAS with FP16 deployment-aligned training "
                                   "on a simulated edge device.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic vessel dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="key=value config file")
    _add_fields(p, _SYNTH_FIELDS)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("search", help="run the evolutionary search")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--profile", help="device profile file (key=value)")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--threads", type=int, help="worker threads (default $LPNAS_THREADS or 1)")
    _add_fields(p, {**_GA_FIELDS, **_FITNESS_FIELDS, **_TRAIN_FIELDS,
                    **_PRECISION_FIELDS, **_SPACE_FIELDS})
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="train a single genotype")
    p.add_argument("--data", required=True)
    p.add_argument("--genotype", required=True, help="architecture code string")
    p.add_argument("--finetune", action="store_true", help="add FP16-aware fine-tuning")
    p.add_argument("--out", help="write checkpoint + manifest here")
    p.add_argument("--profile", help="device profile file")
    p.add_argument("--config", help="key=value config file")
    _add_fields(p, {**_TRAIN_FIELDS, **_PRECISION_FIELDS, "seed": (int, 0)})
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("fp32", "deploy"), default="fp32")
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-genotype", help="print the genotype string of a model")
    p.add_argument("--checkpoint")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_export_genotype)

    p = sub.add_parser("report", help="render figures and summaries for run directories")
    p.add_argument("run_dirs", nargs="+", metavar="RUN_DIR")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except gt.GenotypeError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except (InputError, datamod.DataError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except trainer.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
