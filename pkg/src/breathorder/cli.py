"""Command-line entry point: ``breathorder <subcommand> [options]``.

Subcommands: synth, mask, train, eval, curve, gradcheck, inspect.
Exit codes: 0 success, 1 configuration error, 2 missing or unreadable
artifact, 3 numeric failure.

Heavy modules are imported inside the command functions so that
``--threads`` can cap BLAS threads before numpy loads.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3

CONFIG_NAME = "config.json"
MODEL_NAME = "model.bock"
SPLIT_NAME = "split.json"


class ConfigError(Exception):
    pass


class MissingArtifact(Exception):
    pass


# -- run config ----------------------------------------------------------------

DEFAULTS = {
    "seed": 0,
    "preset": "toy",
    "encoder": {"posenc_mode": "liere", "mgm_enabled": True, "keep_ratio": 0.2},
    "train": {"method": "embedding", "epochs": 5},
    "synth": {"M": 12},
    "sequences": 200,
    "test_fraction": 0.2,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise MissingArtifact(f"config file not found: {path}")
        try:
            cfg = _merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    flags = {
        "seed": ("seed",), "preset": ("preset",), "sequences": ("sequences",),
        "method": ("train", "method"), "epochs": ("train", "epochs"), "lr": ("train", "lr"),
        "posenc": ("encoder", "posenc_mode"), "keep_ratio": ("encoder", "keep_ratio"),
        "clips": ("synth", "M"),
    }
    for flag, keys in flags.items():
        value = getattr(args, flag, None)
        if value is not None:
            node = cfg
            for k in keys[:-1]:
                node = node.setdefault(k, {})
            node[keys[-1]] = value
    if getattr(args, "mgm", None) is not None:
        cfg["encoder"]["mgm_enabled"] = args.mgm == "on"
    # one root seed drives every random stream
    for section in ("encoder", "train", "synth"):
        cfg[section]["seed"] = cfg["seed"]
    return cfg


def encoder_config(cfg: dict):
    from .encoder import ConfigError as EncConfigError, EncoderConfig

    try:
        return EncoderConfig.preset(cfg["preset"], **cfg["encoder"])
    except (EncConfigError, TypeError) as exc:
        raise ConfigError(f"encoder config: {exc}") from exc


def train_config(cfg: dict):
    from .train import TrainConfig

    try:
        return TrainConfig(**cfg["train"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"train config: {exc}") from exc


def synth_params(cfg: dict):
    from .dataio import SynthParams

    try:
        p = SynthParams(**cfg["synth"])
        p.validate()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"synth config: {exc}") from exc
    if p.M < 3:
        raise ConfigError(f"synth config: need at least 3 clips per sequence for thirds labeling, got {p.M}")
    return p


def write_config(out_dir: Path, cfg: dict, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = dict(cfg, command=command)
    (out_dir / CONFIG_NAME).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require_dir(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise MissingArtifact(f"{what} directory not found: {p}")
    return p


def _load_dataset(path):
    from .dataio import load_dataset

    root = _require_dir(path, "data")
    try:
        return load_dataset(root)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(exc)) from exc


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required")
    return Path(args.out)


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .dataio import synth_sequence, write_manifest, write_sequence

    cfg = resolve_config(args)
    params = synth_params(cfg)
    n = int(cfg["sequences"])
    if n < 1:
        raise ConfigError("--sequences must be positive")
    out = _out_dir(args)
    entries = []
    for i in range(n):
        vid, pid = f"synth_{i:04d}", f"p{i:04d}"
        seq = synth_sequence(params, vid, pid)
        entries.append({"video_id": vid, "participant_id": pid, "clips": write_sequence(seq, out)})
    write_manifest(out, entries, {"synth": cfg["synth"]})
    write_config(out, cfg, "synth")
    print(f"wrote {n} sequences x {params.M} clips to {out}")
    return EXIT_OK


def cmd_mask(args) -> int:
    from .dataio import RecoverySequence, write_manifest, write_sequence
    from .motion import motion_guided_mask, write_preview

    cfg = resolve_config(args)
    enc = encoder_config(cfg)
    seqs = _load_dataset(args.data)
    out = _out_dir(args)
    entries, previews = [], 0
    for seq in seqs:
        clips = []
        for clip in seq.clips:
            masked, mask, motion = motion_guided_mask(clip, enc.keep_ratio, enc.patch_size,
                                                      enc.search_radius, enc.motion_scorer)
            clips.append(masked)
            if previews < args.previews:
                write_preview(clip, mask, motion, out / "previews", f"{seq.video_id}_clip{clip.clip_index:04d}")
                previews += 1
        masked_seq = RecoverySequence(seq.video_id, clips, seq.participant_id)
        entries.append({"video_id": seq.video_id, "participant_id": seq.participant_id,
                        "clips": write_sequence(masked_seq, out)})
    write_manifest(out, entries, {"masked": {"keep_ratio": enc.keep_ratio, "tile_size": enc.patch_size}})
    write_config(out, cfg, "mask")
    print(f"masked {sum(len(s.clips) for s in seqs)} clips (keep ratio {enc.keep_ratio}, "
          f"tile {enc.patch_size}) into {out}")
    return EXIT_OK


def split_dataset(seqs, cfg: dict, val_fraction: float):
    from .train import assert_disjoint, split_by_participant

    rest, test = split_by_participant(seqs, cfg["test_fraction"], cfg["seed"], salt=1)
    train, val = split_by_participant(rest, val_fraction, cfg["seed"], salt=2)
    assert_disjoint(train, val, test)
    return train, val, test


def cmd_train(args) -> int:
    from . import tensor as tc
    from .encoder import ClipBank
    from .train import train

    cfg = resolve_config(args)
    enc, tcfg = encoder_config(cfg), train_config(cfg)
    seqs = _load_dataset(args.data)
    train_s, val_s, test_s = split_dataset(seqs, cfg, tcfg.val_fraction)
    out = _out_dir(args)
    write_config(out, cfg, "train")
    split = {k: [s.video_id for s in v] for k, v in (("train", train_s), ("val", val_s), ("test", test_s))}
    (out / SPLIT_NAME).write_text(json.dumps(split, indent=2) + "\n")
    bank = ClipBank.from_sequences(list(train_s) + list(val_s), enc)
    res = train(train_s, enc, tcfg, val_seqs=val_s, bank=bank, checkpoint_dir=out / "checkpoints")
    tc.save_checkpoint(out / MODEL_NAME, res.params)
    res.log.write(out)
    last = res.log.epochs[-1]
    print(f"trained {tcfg.method} for {tcfg.epochs} epochs ({len(res.log.steps)} steps); "
          f"final train loss {last['train_loss']:.4f}"
          + (f", val accuracy {last['val_accuracy']:.3f}" if "val_accuracy" in last else ""))
    return EXIT_OK


def _load_run(ckpt: str):
    """(run config, params) from a train output directory or a .bock file inside one."""
    from . import tensor as tc

    path = Path(ckpt)
    run_dir, model = (path, path / MODEL_NAME) if path.is_dir() else (path.parent, path)
    if not model.is_file():
        raise MissingArtifact(f"checkpoint not found: {model}")
    if not (run_dir / CONFIG_NAME).is_file():
        raise MissingArtifact(f"no {CONFIG_NAME} next to checkpoint {model}")
    cfg = json.loads((run_dir / CONFIG_NAME).read_text())
    try:
        params = {k: tc.parameter(v) for k, v in tc.load_checkpoint(model).items()}
    except tc.CheckpointFormatError as exc:
        raise MissingArtifact(str(exc)) from exc
    split = json.loads((run_dir / SPLIT_NAME).read_text()) if (run_dir / SPLIT_NAME).is_file() else None
    return cfg, params, split


def _check_params(params: dict, expected: dict, ckpt: str) -> None:
    missing = sorted(set(expected) - set(params))
    if missing:
        raise ConfigError(f"checkpoint {ckpt} lacks parameters {missing[:3]} for its config")
    for k, p in expected.items():
        if params[k].shape != p.shape:
            raise ConfigError(f"checkpoint {ckpt}: {k} has shape {params[k].shape}, config expects {p.shape}")


def evaluate_checkpoint(ckpt: str, seqs):
    from .encoder import ClipBank
    from .evaluate import evaluate
    from .train import all_pairs, init_params, make_predictor

    cfg, params, split = _load_run(ckpt)
    enc, tcfg = encoder_config(cfg), train_config(cfg)
    _check_params(params, init_params(tcfg.method, enc), ckpt)
    by_id = {s.video_id: s for s in seqs}
    if split is not None:
        unknown = [v for v in split["test"] if v not in by_id]
        if unknown:
            raise MissingArtifact(f"test videos {unknown[:3]} from {ckpt} are not in the dataset")
        test = [by_id[v] for v in split["test"]]
    else:
        test = list(seqs)
    bank = ClipBank.from_sequences(test, enc)
    predictor = make_predictor(tcfg.method, enc, params, bank)
    report = evaluate(predictor, all_pairs(test), posenc=enc.posenc_mode,
                      mgm=enc.mgm_enabled)
    return cfg, report


def cmd_eval(args) -> int:
    from .evaluate import curve_from_report, render_reports

    if not args.ckpt:
        raise MissingArtifact("eval needs at least one --ckpt (train output directory or .bock file)")
    seqs = _load_dataset(args.data)
    reports, configs = [], []
    for ckpt in args.ckpt:
        cfg, report = evaluate_checkpoint(ckpt, seqs)
        reports.append(report)
        configs.append(cfg)
        mgm = "on" if report.mgm else "off"
        print(f"{report.method:<10} posenc={report.posenc:<5} mgm={mgm:<3} "
              f"n={report.n_pairs} accuracy={report.accuracy:.4f} f1={report.f1:.4f}")
    out = _out_dir(args)
    meta = {"seed": configs[0]["seed"], "checkpoints": [str(c) for c in args.ckpt], "configs": configs}
    render_reports(reports, curve_from_report(reports[0]), out, meta)
    write_config(out, {"checkpoints": meta["checkpoints"], "runs": configs, "seed": meta["seed"]}, "eval")
    return EXIT_OK


def cmd_curve(args) -> int:
    """Redraw curve.csv / curve.svg from an eval directory's run_meta.json."""
    from .evaluate import SeparationCurve, curve_csv, curve_svg

    src = _require_dir(args.report, "report")
    meta_path = src / "run_meta.json"
    if not meta_path.is_file():
        raise MissingArtifact(f"no run_meta.json in {src}")
    meta = json.loads(meta_path.read_text())
    if "curve" not in meta:
        raise MissingArtifact(f"{meta_path} holds no separation curve")
    c = meta["curve"]
    curve = SeparationCurve(c["delta"], c["n"], c["accuracy"])
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curve.csv").write_text(curve_csv(curve))
    (out / "curve.svg").write_text(curve_svg(curve, title=meta["reports"][0]["method"]))
    write_config(out, {"report": str(src), "seed": meta.get("seed")}, "curve")
    rho = curve.spearman()
    print(f"{len(curve.deltas)} separations; Spearman(delta, accuracy) = {rho:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradsuite

    names = args.only or None
    unknown = sorted(set(names or ()) - set(gradsuite.CHECKS))
    if unknown:
        raise ConfigError(f"unknown gradient checks {unknown}; known: {sorted(gradsuite.CHECKS)}")
    results = gradsuite.run(names)
    print(gradsuite.format_table(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks pass")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_inspect(args) -> int:
    from . import tensor as tc
    from .dataio import ClipFormatError, read_clip, read_manifest

    path = Path(args.path)
    if not path.exists():
        raise MissingArtifact(f"no such file or directory: {path}")
    try:
        if path.is_dir():
            if (path / "manifest.json").is_file():
                doc = read_manifest(path)
                seqs = doc["sequences"]
                print(f"dataset {path}: {len(seqs)} sequences, {sum(len(s['clips']) for s in seqs)} clips")
            for name in (CONFIG_NAME, SPLIT_NAME, "results.csv", "epochs.csv"):
                if (path / name).is_file():
                    print(f"--- {name}\n{(path / name).read_text().rstrip()}")
        elif path.suffix == ".vclp":
            c = read_clip(path)
            print(f"clip {c.video_id!r} #{c.clip_index}: frames {c.frames.shape} fps {c.fps:g} "
                  f"range [{c.frames.min():.3f}, {c.frames.max():.3f}]")
        elif path.suffix == ".bock":
            params = tc.load_checkpoint(path)
            total = sum(v.size for v in params.values())
            for k, v in params.items():
                print(f"{k:<40} {str(v.shape):<16} norm {float((v ** 2).sum()) ** 0.5:.4g}")
            print(f"{len(params)} tensors, {total} values")
        else:
            print(path.read_text())
    except (ClipFormatError, tc.CheckpointFormatError) as exc:
        raise MissingArtifact(str(exc)) from exc
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--preset", choices=["toy", "paper"])
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--method", choices=["embedding", "tt_full", "tt_cls"])
    model.add_argument("--posenc", choices=["ape", "liere"])
    model.add_argument("--mgm", choices=["on", "off"])
    model.add_argument("--keep-ratio", type=float, dest="keep_ratio")

    p = argparse.ArgumentParser(prog="breathorder", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic recovery dataset")
    s.add_argument("--sequences", type=int)
    s.add_argument("--clips", type=int, help="clips per sequence (M)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("mask", parents=[common, model], help="write motion-masked clips and previews")
    s.add_argument("--data", help="input dataset directory")
    s.add_argument("--previews", type=int, default=4, help="number of clips to write previews for")
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("train", parents=[common, model], help="train one method")
    s.add_argument("--data")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate checkpoints on their held-out split")
    s.add_argument("--data")
    s.add_argument("--ckpt", action="append", help="train output directory or .bock file (repeatable)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("curve", parents=[common], help="redraw the separation curve of an eval run")
    s.add_argument("--report", help="eval output directory")
    s.set_defaults(func=cmd_curve)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient table")
    s.add_argument("--only", action="append", help="run only the named check (repeatable)")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("inspect", parents=[common], help="describe a clip, checkpoint or run directory")
    s.add_argument("path")
    s.set_defaults(func=cmd_inspect)
    return p


def _limit_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be positive")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _limit_threads(args.threads)
        from .dataio import ClipFormatError
        from .tensor import CheckpointFormatError, NumericError

        try:
            return args.func(args)
        except NumericError as exc:
            print(f"numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        except (MissingArtifact, FileNotFoundError, ClipFormatError, CheckpointFormatError) as exc:
            print(f"missing or unreadable artifact: {exc}", file=sys.stderr)
            return EXIT_MISSING
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
