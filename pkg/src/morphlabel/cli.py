"""Command-line interface.

Subcommands: fit-ellipse, gen-pseudo, make-dataset, train, eval, ablate,
gradcheck. Configuration is a JSON document (strictly validated, unknown
keys rejected); selected flags override config fields. Every output
directory receives a run.json with the fully resolved configuration and
a content hash of the inputs. Exit codes: 0 ok, 2 config error, 3 data
error, 4 numerical failure, 5 test-suite failure.

`MORPHLABEL_THREADS` caps how many training subprocesses `ablate` runs
in parallel.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, io
from .dataset import load_dataset, make_dataset
from .errors import (
    ConfigError,
    DataError,
    MorphLabelError,
    NumericalFailure,
)
from .geometry import fit_mask_ellipse
from .metrics import evaluate_volumes
from .network import MASegNet, ModelConfig, infer
from .pseudolabel import ROTATION_MODES, build_pyramid, generate_pseudo_label
from .training import TrainConfig, train

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_SUITE = 5

_MODEL_KEYS = {"depth", "base_channels", "mode", "ma_loss_on", "seed"}
_TRAIN_KEYS = {
    "epochs", "batch_size", "lr", "lr_decay", "beta1", "beta2", "eps",
    "weight_decay", "k_folds", "augment", "seed",
}
_AUG_KEYS = {"hflip", "vflip", "rotate", "blur"}
_PSEUDO_KEYS = {"rotation_mode", "sigma_scale"}
_ABLATE_KEYS = {"arms", "seeds", "folds"}


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_config(path=None, overrides=None) -> dict:
    """Load, validate and normalize a run configuration document."""
    doc = {}
    if path is not None:
        try:
            doc = io.read_json(path)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(doc, {"model", "train", "pseudo", "ablate"}, "config")
    model = dict(doc.get("model", {}))
    train_sec = dict(doc.get("train", {}))
    pseudo = dict(doc.get("pseudo", {}))
    ablate = dict(doc.get("ablate", {}))
    _check_keys(model, _MODEL_KEYS, "model")
    _check_keys(train_sec, _TRAIN_KEYS, "train")
    _check_keys(pseudo, _PSEUDO_KEYS, "pseudo")
    _check_keys(ablate, _ABLATE_KEYS, "ablate")
    if "augment" in train_sec:
        if not isinstance(train_sec["augment"], dict):
            raise ConfigError("train.augment must be an object")
        _check_keys(train_sec["augment"], _AUG_KEYS, "train.augment")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, name = key.split(".", 1)
        if section == "model":
            model[name] = value
        elif section == "train":
            train_sec[name] = value
        elif section == "pseudo":
            pseudo[name] = value
    mode = pseudo.get("rotation_mode", "proper")
    if mode not in ROTATION_MODES:
        raise ConfigError(f"pseudo.rotation_mode must be one of {ROTATION_MODES}")
    sigma_scale = float(pseudo.get("sigma_scale", 1.0))
    if sigma_scale <= 0:
        raise ConfigError("pseudo.sigma_scale must be positive")
    try:
        model_cfg = ModelConfig.from_dict(model)
        model_cfg.validate()
        train_cfg = TrainConfig.from_dict(
            {**train_sec, "rotation_mode": mode, "sigma_scale": sigma_scale}
        )
        train_cfg.validate()
    except (MorphLabelError, ValueError, TypeError) as e:
        raise ConfigError(f"invalid configuration: {e}") from None
    resolved = {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "pseudo": {"rotation_mode": mode, "sigma_scale": sigma_scale},
    }
    arms = list(ablate.get("arms", ["plain", "ds", "ma"]))
    for arm in arms:
        if arm not in ("plain", "ds", "ma"):
            raise ConfigError(f"unknown ablation arm {arm!r}")
    resolved["ablate"] = {
        "arms": arms,
        "seeds": [int(s) for s in ablate.get("seeds", [0, 1, 2])],
        "folds": [int(f) for f in ablate.get("folds", [0])],
    }
    # pseudo options live inside the train section after resolution
    resolved["train"].pop("rotation_mode", None)
    resolved["train"].pop("sigma_scale", None)
    return resolved


def _train_config_from(resolved: dict) -> TrainConfig:
    merged = {**resolved["train"], **resolved["pseudo"]}
    return TrainConfig.from_dict(merged)


def write_run_json(out_dir, command: str, resolved: dict, inputs: dict) -> None:
    io.write_json(
        Path(out_dir) / "run.json",
        {
            "command": command,
            "version": __version__,
            "config": resolved,
            "inputs": inputs,
        },
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_fit_ellipse(args) -> int:
    mask = io.read_pgm(args.mask)
    params = fit_mask_ellipse(mask)
    payload = json.dumps(params.to_dict(), sort_keys=True)
    print(payload)
    if args.json_out:
        io.atomic_write_text(args.json_out, payload + "\n")
    return 0


def cmd_gen_pseudo(args) -> int:
    mask = io.read_pgm(args.mask)
    heatmap = generate_pseudo_label(mask, args.rotation_mode, args.sigma_scale)
    io.write_raw_f32(args.out, heatmap)
    stats = {
        "peak": float(heatmap.max()),
        "min": float(heatmap.min()),
        "argmax": [int(v) for v in np.unravel_index(int(heatmap.argmax()),
                                                    heatmap.shape)],
        "levels": [],
    }
    if args.pyramid_depth:
        out = Path(args.out)
        for n, level in enumerate(build_pyramid(heatmap, args.pyramid_depth), start=1):
            lpath = out.with_name(f"{out.stem}_level{n}{out.suffix}")
            io.write_raw_f32(lpath, level)
            stats["levels"].append(
                {"level": n, "path": lpath.name, "max": float(level.max())}
            )
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_make_dataset(args) -> int:
    manifest = make_dataset(
        args.out, args.volumes, args.slices_per_volume, args.size,
        args.ambiguity, args.seed, args.folds,
    )
    write_run_json(
        args.out, "make-dataset",
        {k: manifest[k] for k in
         ("size", "ambiguity", "seed", "volumes", "slices_per_volume")},
        {},
    )
    print(json.dumps({
        "volumes": manifest["volumes"],
        "slices": len(manifest["slices"]),
        "folds": manifest["folds"]["k"],
    }, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from . import report

    resolved = load_config(args.config, {
        "model.mode": args.mode,
        "model.seed": args.seed,
        "train.seed": args.seed,
        "train.epochs": args.epochs,
        "train.batch_size": args.batch_size,
        "train.lr": args.lr,
    })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(args.data)
    fold = ds.fold(args.fold)
    train_set = ds.slices_of(fold["train"])
    val_set = ds.slices_of(fold["val"])
    model_cfg = ModelConfig.from_dict(resolved["model"])
    train_cfg = _train_config_from(resolved)
    model = MASegNet(model_cfg)
    log, best_state = train(model, train_set, val_set, train_cfg)
    num_levels = 1 if model_cfg.mode == "plain" else model_cfg.depth
    io.atomic_write_text(out / "train_log.csv",
                         "\n".join(log.csv_lines(num_levels)) + "\n")
    io.write_json(out / "summary.json", log.summary())
    io.save_checkpoint(out / "checkpoint.bin",
                       [(k, best_state[k]) for k in model.params],
                       model_cfg.to_dict())
    report.save_training_curves(log, out / "training_curves.png")
    write_run_json(out, "train", resolved,
                   {"fold": args.fold, "data_hash": io.hash_tree(args.data)})
    print(json.dumps(log.summary(), sort_keys=True))
    return 0


def _evaluate_checkpoint(checkpoint, data, fold_index):
    model_cfg_dict, state = io.load_checkpoint(checkpoint)
    model = MASegNet(ModelConfig.from_dict(model_cfg_dict))
    model.load_state(state)
    ds = load_dataset(data)
    fold = ds.fold(fold_index)
    volume_ids = fold["test"]
    pairs = []
    for v in volume_ids:
        slices = ds.volumes[v]
        preds = [infer(model, p.image) for p in slices]
        gts = [p.strong_label for p in slices]
        pairs.append((preds, gts))
    return volume_ids, evaluate_volumes(pairs), model_cfg_dict


def cmd_eval(args) -> int:
    from . import report

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    volume_ids, rec, model_cfg_dict = _evaluate_checkpoint(
        args.checkpoint, args.data, args.fold
    )
    lines = ["volume,dsc,sen,hd"]
    for v, d, s, h in zip(volume_ids, rec.dsc_values, rec.sen_values, rec.hd_values):
        lines.append(f"{v},{d!r},{s!r},{h!r}")
    io.atomic_write_text(out / "metrics.csv", "\n".join(lines) + "\n")
    io.write_json(out / "metrics.json",
                  {"summary": rec.summary(), "formatted": rec.formatted(),
                   "model": model_cfg_dict})
    report.save_volume_metrics(volume_ids, rec.dsc_values, rec.hd_values,
                               out / "metrics.png")
    write_run_json(out, "eval", {"model": model_cfg_dict},
                   {"fold": args.fold,
                    "checkpoint_hash": io.hash_tree(args.checkpoint),
                    "data_hash": io.hash_tree(args.data)})
    print(json.dumps(rec.formatted(), sort_keys=True, ensure_ascii=False))
    return 0


def _run_child(cmd_args, env) -> None:
    proc = subprocess.run(
        [sys.executable, "-m", "morphlabel", *cmd_args],
        env=env, capture_output=True, text=True,
    )
    if proc.returncode != 0:
        raise MorphLabelError(
            f"child {' '.join(cmd_args[:2])} failed "
            f"(exit {proc.returncode}): {proc.stderr.strip()[-500:]}"
        )


def cmd_ablate(args) -> int:
    from . import report

    resolved = load_config(args.config, {"train.epochs": args.epochs})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan = [
        (arm, seed, fold)
        for arm in resolved["ablate"]["arms"]
        for seed in resolved["ablate"]["seeds"]
        for fold in resolved["ablate"]["folds"]
    ]
    workers = max(1, int(os.environ.get("MORPHLABEL_THREADS", "1")))
    child_env = dict(os.environ)
    child_env.update({"OPENBLAS_NUM_THREADS": "1", "OMP_NUM_THREADS": "1",
                      "MKL_NUM_THREADS": "1"})
    cfg_path = out / "resolved_config.json"
    io.write_json(cfg_path, {k: resolved[k] for k in ("model", "train", "pseudo")})

    def run_one(spec):
        arm, seed, fold = spec
        run_dir = out / "runs" / f"{arm}_seed{seed}_fold{fold}"
        _run_child([
            "train", "--config", str(cfg_path), "--data", str(args.data),
            "--fold", str(fold), "--out", str(run_dir),
            "--mode", arm, "--seed", str(seed),
        ], child_env)
        _run_child([
            "eval", "--checkpoint", str(run_dir / "checkpoint.bin"),
            "--data", str(args.data), "--fold", str(fold),
            "--out", str(run_dir / "eval"),
        ], child_env)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(run_one, plan))

    # gather per-run results
    per_run = []
    conv_lines = ["arm,seed,fold,epoch,split,total"]
    curves = []
    for arm, seed, fold in plan:
        run_dir = out / "runs" / f"{arm}_seed{seed}_fold{fold}"
        summary = io.read_json(run_dir / "summary.json")
        metrics = io.read_json(run_dir / "eval" / "metrics.json")["summary"]
        per_run.append({"arm": arm, "seed": seed, "fold": fold,
                        **summary, **metrics})
        epochs, vals = [], []
        with open(run_dir / "train_log.csv", "r", encoding="utf-8") as f:
            header = f.readline().strip().split(",")
            e_i, s_i, t_i = (header.index(c) for c in ("epoch", "split", "total"))
            for line in f:
                cells = line.strip().split(",")
                conv_lines.append(
                    f"{arm},{seed},{fold},{cells[e_i]},{cells[s_i]},{cells[t_i]}"
                )
                if cells[s_i] == "val":
                    epochs.append(int(cells[e_i]))
                    vals.append(float(cells[t_i]))
        curves.append({"arm": arm, "seed": seed, "epochs": epochs,
                       "val_total": vals,
                       "convergence_epoch": summary["convergence_epoch"]})

    rows = []
    for arm in resolved["ablate"]["arms"]:
        runs = [r for r in per_run if r["arm"] == arm]
        row = {"arm": arm, "runs": len(runs)}
        for key in ("dsc", "sen", "hd"):
            vals = [r[f"{key}_mean"] for r in runs]
            row[f"{key}_mean"] = float(np.mean(vals))
            row[f"{key}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        row["convergence_epochs"] = [r["convergence_epoch"] for r in runs]
        rows.append(row)
    base = next((r for r in rows if r["arm"] == "plain"), None)
    for row in rows:
        if base is not None and row is not base:
            row["dsc_delta"] = row["dsc_mean"] - base["dsc_mean"]
            row["hd_delta"] = row["hd_mean"] - base["hd_mean"]

    cmp_lines = ["arm,runs,dsc_mean,dsc_std,sen_mean,sen_std,hd_mean,hd_std"]
    for r in rows:
        cmp_lines.append(
            f"{r['arm']},{r['runs']},{r['dsc_mean']!r},{r['dsc_std']!r},"
            f"{r['sen_mean']!r},{r['sen_std']!r},{r['hd_mean']!r},{r['hd_std']!r}"
        )
    io.atomic_write_text(out / "comparison.csv", "\n".join(cmp_lines) + "\n")
    io.atomic_write_text(out / "convergence.csv", "\n".join(conv_lines) + "\n")
    io.write_json(out / "ablation.json", {"per_run": per_run, "comparison": rows})
    report.save_convergence_comparison(curves, out / "convergence.png")
    report.save_ablation_summary(rows, out / "ablation_summary.png")
    write_run_json(out, "ablate", resolved,
                   {"data_hash": io.hash_tree(args.data)})
    print(json.dumps({"runs": len(plan),
                      "arms": {r["arm"]: r["dsc_mean"] for r in rows}},
                     sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import REL_TOL, run_composite_ma_check, run_suite

    seeds = range(args.seed, args.seed + args.instances)
    report_map, ok = run_suite(seeds)
    comp_err = run_composite_ma_check(seeds)
    report_map["composite_loss_through_ma_block"] = comp_err
    ok = ok and comp_err <= REL_TOL
    worst = max(report_map.values())
    for name in sorted(report_map):
        status = "ok" if report_map[name] <= REL_TOL else "FAIL"
        print(f"{status:4s} {name:32s} max rel err {report_map[name]:.3e}")
    print(json.dumps({"max_rel_err": worst, "tolerance": REL_TOL,
                      "passed": bool(ok)}, sort_keys=True))
    return 0 if ok else EXIT_SUITE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="morphlabel",
        description="Gaussian pseudo-labels and morphological attention "
                    "on synthetic phantoms",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("fit-ellipse", help="fit an ellipse to a PGM mask")
    sp.add_argument("--mask", required=True)
    sp.add_argument("--json-out")
    sp.set_defaults(fn=cmd_fit_ellipse)

    sp = sub.add_parser("gen-pseudo", help="Gaussian pseudo label for a mask")
    sp.add_argument("--mask", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--rotation-mode", choices=ROTATION_MODES, default="proper")
    sp.add_argument("--sigma-scale", type=float, default=1.0)
    sp.add_argument("--pyramid-depth", type=int, default=0)
    sp.set_defaults(fn=cmd_gen_pseudo)

    sp = sub.add_parser("make-dataset", help="generate a phantom dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--volumes", type=int, required=True)
    sp.add_argument("--slices-per-volume", type=int, default=8)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--ambiguity", type=float, default=0.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--folds", type=int, default=3)
    sp.set_defaults(fn=cmd_make_dataset)

    sp = sub.add_parser("train", help="train one model on one fold")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--fold", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=("plain", "ds", "ma"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int, dest="batch_size")
    sp.add_argument("--lr", type=float)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a fold's test set")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--fold", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="run plain/ds/ma across seeds and folds")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--instances", type=int, default=20)
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        _emit_error(e)
        return EXIT_CONFIG
    except NumericalFailure as e:
        _emit_error(e)
        return EXIT_NUMERICAL
    except (DataError, FileNotFoundError) as e:
        _emit_error(e)
        return EXIT_DATA
    except MorphLabelError as e:
        _emit_error(e)
        return 1


def _emit_error(e: BaseException) -> None:
    print(json.dumps({"error": type(e).__name__, "message": str(e)}),
          file=sys.stderr)


if __name__ == "__main__":
    raise SystemExit(main())
