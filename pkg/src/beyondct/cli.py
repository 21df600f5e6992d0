"""Batch command-line surface tying all modules into reproducible runs.

Subcommands: ``import`` (NIfTI to canonical volume), ``preprocess``
(resample + pad + normalize), ``phantom-gen``, ``augment-preview``,
``train``, ``predict``, ``evaluate``, ``report`` (merge runs), and
``gradcheck``.

Every command exits 0 on success and nonzero with a one-line JSON error
object on stderr otherwise.  Commands that produce an output directory
write a ``run-manifest.json`` there capturing the effective configuration,
its hash, the seed, and library versions — re-running with the same
manifest reproduces the primary outputs byte-for-byte in deterministic
mode.

Heavy numeric imports are deferred until after thread pinning: pass
``--deterministic`` to force single-threaded numeric kernels, or set
``BCT_THREADS`` to cap BLAS worker threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import BeyondCTError, ConfigError, ContractError

_THREAD_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _pin_threads(deterministic: bool) -> None:
    """Cap numeric worker threads before numpy configures its BLAS."""
    if "numpy" in sys.modules:
        return  # embedded use: the host process already configured numpy
    count = "1" if deterministic else os.environ.get("BCT_THREADS", "").strip()
    if not count:
        return
    for var in _THREAD_VARS:
        os.environ[var] = count


def _emit(payload: dict) -> None:
    print(json.dumps(payload))


def _write_run_manifest(out_dir: Path, command: str, doc: dict, seed: int | None) -> Path:
    import hashlib

    import numpy as np

    from . import __version__
    from .util import canonical_json

    body = canonical_json(doc)
    manifest = {
        "command": command,
        "config": doc,
        "config_hash": hashlib.sha256(body.encode("utf-8")).hexdigest(),
        "seed": seed,
        "versions": {
            "beyondct": __version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
            "numpy": np.__version__,
        },
    }
    path = out_dir / "run-manifest.json"
    path.write_text(canonical_json(manifest) + "\n", encoding="utf-8")
    return path


def _load_reference_coeffs(path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read reference coefficients {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"reference coefficients {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"reference coefficients {path} must be a JSON object")
    return doc


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def _flag_assignments(args: argparse.Namespace) -> list[str]:
    """Dedicated flags become dotted-path overrides, applied last."""
    out: list[str] = []
    if getattr(args, "manifest", None):
        out.append(f"manifest={json.dumps(str(args.manifest))}")
    if getattr(args, "volume_dir", None):
        out.append(f"volume_dir={json.dumps(str(args.volume_dir))}")
    if getattr(args, "out", None):
        out.append(f"out_dir={json.dumps(str(args.out))}")
    if getattr(args, "seed", None) is not None:
        out.append(f"seed={args.seed}")
        out.append(f"train.seed={args.seed}")
    if getattr(args, "epochs", None) is not None:
        out.append(f"train.epochs={args.epochs}")
    if getattr(args, "target", None):
        out.append(f"model.target={json.dumps(args.target.upper())}")
    if getattr(args, "arch", None):
        out.append(f"model.arch={json.dumps(args.arch)}")
    if getattr(args, "use_demographics", None) is not None:
        value = "true" if args.use_demographics else "false"
        out.append(f"model.use_demographics={value}")
    if getattr(args, "no_augment", False):
        out.append("augment_enabled=false")
    if getattr(args, "deterministic", False):
        out.append("deterministic=true")
    return out


def _resolve_config(args: argparse.Namespace):
    from .config import (
        RunConfig,
        apply_overrides,
        apply_tiny_preset,
        load_run_config,
        run_config_from_dict,
        run_config_to_dict,
    )

    if getattr(args, "config", None):
        doc = run_config_to_dict(load_run_config(args.config))
    else:
        doc = run_config_to_dict(RunConfig())
    if getattr(args, "tiny", False):
        doc = apply_tiny_preset(doc)
    assignments = list(getattr(args, "set", None) or [])
    assignments += _flag_assignments(args)
    doc = apply_overrides(doc, assignments)
    return run_config_from_dict(doc)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_import(args: argparse.Namespace) -> int:
    from .volume import import_nifti, save_volume

    vol = import_nifti(args.input)
    out = Path(args.output)
    save_volume(vol, out)
    _emit({
        "out": str(out),
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing_mm),
        "intensity": vol.intensity,
    })
    return 0


def cmd_preprocess(args: argparse.Namespace) -> int:
    from .volume import load_volume, preprocess_volume, save_volume

    vol = load_volume(args.input)
    processed = preprocess_volume(vol, target_mm=args.spacing, cube=args.cube)
    out = Path(args.output)
    save_volume(processed, out)
    _emit({
        "out": str(out),
        "dims": list(processed.dims),
        "spacing_mm": list(processed.spacing_mm),
        "intensity": processed.intensity,
    })
    return 0


def cmd_phantom_gen(args: argparse.Namespace) -> int:
    import dataclasses

    from .phantom import PhantomSpec, write_cohort

    spec_kwargs = {}
    for field_name, flag in (
        ("cube_mm", "cube_mm"), ("spacing_mm", "spacing"), ("alpha", "alpha"),
        ("beta", "beta"), ("gamma", "gamma"), ("sigma", "sigma"),
    ):
        value = getattr(args, flag)
        if value is not None:
            spec_kwargs[field_name] = value
    spec = PhantomSpec(**spec_kwargs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest, samples = write_cohort(
        spec, args.n, seed=args.seed, out_dir=out_dir, preprocess=not args.raw
    )
    doc = {"spec": dataclasses.asdict(spec), "n": args.n, "raw": bool(args.raw)}
    _write_run_manifest(out_dir, "phantom-gen", doc, args.seed)
    _emit({
        "manifest": str(manifest),
        "n": len(samples),
        "grid": spec.grid,
        "out": str(out_dir),
    })
    return 0


def cmd_augment_preview(args: argparse.Namespace) -> int:
    import dataclasses

    from .augment import apply_plan, sample_plan
    from .util import canonical_json
    from .volume import load_volume, save_volume

    cfg = _resolve_config(args)
    vol = load_volume(args.volume)
    seed = args.seed if args.seed is not None else 0
    plan = sample_plan(cfg.augment, seed)
    augmented = apply_plan(vol, plan)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_volume(augmented, out_dir / "augmented")
    plan_doc = {
        "seed": plan.seed,
        "steps": [{"kind": kind, "params": params} for kind, params in plan.steps],
    }
    (out_dir / "plan.json").write_text(canonical_json(plan_doc) + "\n", encoding="utf-8")
    doc = {"augment": dataclasses.asdict(cfg.augment), "volume": str(args.volume)}
    _write_run_manifest(out_dir, "augment-preview", doc, seed)
    _emit({
        "out": str(out_dir),
        "steps": [kind for kind, _ in plan.steps],
        "plan": str(out_dir / "plan.json"),
    })
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from .config import run_config_to_dict
    from .train import load_manifest, save_manifest, split_subjects
    from .train import train as run_training
    from .util import canonical_json

    cfg = _resolve_config(args)
    if not cfg.manifest:
        raise ConfigError("train needs a manifest: set --manifest or the config key")
    manifest_path = Path(cfg.manifest)
    samples = load_manifest(manifest_path)
    root = Path(cfg.volume_dir) if cfg.volume_dir else manifest_path.parent
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    splits = split_subjects(samples, cfg.train.split_fractions, cfg.train.seed)
    augment = cfg.augment if cfg.augment_enabled else None
    result = run_training(
        samples, cfg.model, cfg.train, augment, out_dir,
        volume_root=root, splits=splits, log_timing=not cfg.deterministic,
    )

    split_doc = {}
    for name, part in splits.items():
        split_doc[name] = [s.scan_id for s in part]
        if part:
            save_manifest(part, out_dir / f"{name}_manifest.csv")
    (out_dir / "splits.json").write_text(canonical_json(split_doc) + "\n", encoding="utf-8")
    _write_run_manifest(out_dir, "train", run_config_to_dict(cfg), cfg.seed)
    _emit({
        "checkpoint": str(result.checkpoint_path),
        "best_epoch": result.best.epoch,
        "best_val_mae": result.best.val_mae,
        "epochs_run": len(result.history),
        "out": str(out_dir),
    })
    return 0


def _actual_stage(sample, coeffs: dict) -> str:
    from .metrics import gold_stage, reference_fev1

    ref = reference_fev1(sample.demographics, coeffs)
    if ref <= 0:
        raise ContractError(
            f"reference FEV1 for scan {sample.scan_id} is nonpositive ({ref}); "
            "check the reference coefficients"
        )
    pct = 100.0 * sample.pft.fev1_l / ref
    return gold_stage(sample.pft.fev1_l, sample.pft.fvc_l, pct)


def cmd_predict(args: argparse.Namespace) -> int:
    from .metrics import PredictionPair, save_predictions
    from .model import predict as model_predict
    from .train import load_checkpoint, load_manifest, load_volumes

    ckpt = load_checkpoint(args.checkpoint)
    params = ckpt.to_params()
    model_cfg = ckpt.model_config
    samples = load_manifest(args.manifest)
    root = Path(args.volume_dir) if args.volume_dir else Path(args.manifest).parent
    volumes = load_volumes(samples, model_cfg, root)
    coeffs = _load_reference_coeffs(args.reference_coeffs) if args.reference_coeffs else None

    pairs = []
    for sample in samples:
        value = model_predict(
            volumes[sample.volume_path], sample.demographics, params, model_cfg
        )
        pairs.append(
            PredictionPair(
                subject_id=sample.subject_id,
                scan_id=sample.scan_id,
                actual=sample.pft.value(model_cfg.target),
                predicted=value,
                sex=str(sample.demographics.sex),
                smoking_status=str(sample.demographics.smoking_status),
                gold_stage=_actual_stage(sample, coeffs) if coeffs else None,
            )
        )
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    save_predictions(pairs, out)
    _emit({"rows": len(pairs), "out": str(out), "target": model_cfg.target})
    return 0


def _stage_confusion(args: argparse.Namespace):
    from .metrics import confusion_matrix, gold_stage, load_predictions, reference_fev1
    from .train import load_manifest

    missing = [
        flag for flag, value in (
            ("--fvc-predictions", args.fvc_predictions),
            ("--fev1-predictions", args.fev1_predictions),
            ("--manifest", args.manifest),
            ("--reference-coeffs", args.reference_coeffs),
        ) if not value
    ]
    if missing:
        raise ConfigError(
            "stage confusion needs all of --fvc-predictions, --fev1-predictions, "
            f"--manifest, and --reference-coeffs; missing: {', '.join(missing)}"
        )
    coeffs = _load_reference_coeffs(args.reference_coeffs)
    fvc = {p.scan_id: p for p in load_predictions(args.fvc_predictions)}
    fev1 = {p.scan_id: p for p in load_predictions(args.fev1_predictions)}
    demos = {s.scan_id: s.demographics for s in load_manifest(args.manifest)}
    lacking = sorted((set(fvc) | set(fev1)) - (set(fvc) & set(fev1) & set(demos)))
    if lacking:
        raise ContractError(
            "stage confusion needs every scan in both prediction files and the "
            f"manifest; incomplete: {', '.join(lacking[:8])}"
        )
    actual_stages, predicted_stages = [], []
    for scan_id in sorted(fvc):
        demo = demos[scan_id]
        ref = reference_fev1(demo, coeffs)
        if ref <= 0:
            raise ContractError(
                f"reference FEV1 for scan {scan_id} is nonpositive ({ref})"
            )
        actual_stages.append(
            gold_stage(fev1[scan_id].actual, fvc[scan_id].actual,
                       100.0 * fev1[scan_id].actual / ref)
        )
        predicted_stages.append(
            gold_stage(fev1[scan_id].predicted, fvc[scan_id].predicted,
                       100.0 * fev1[scan_id].predicted / ref)
        )
    return confusion_matrix(actual_stages, predicted_stages)


def cmd_evaluate(args: argparse.Namespace) -> int:
    from .metrics import (
        bland_altman,
        cumulative_error_distribution,
        emit_report,
        load_predictions,
        subgroup_report,
        summarize,
    )

    pairs = load_predictions(args.predictions)
    confusion = None
    if args.fvc_predictions or args.fev1_predictions:
        confusion = _stage_confusion(args)
    subgroups = [subgroup_report(pairs, grouping) for grouping in (args.group or [])]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    emit_report(
        pairs, out_dir, confusion=confusion, subgroups=subgroups, cdf_bins=args.bins
    )
    figures = []
    if not args.no_figures:
        from .figures import (
            bland_altman_figure,
            cdf_figure,
            confusion_figure,
            scatter_figure,
        )

        figures.append(str(scatter_figure(pairs, out_dir / "scatter.png")))
        figures.append(
            str(bland_altman_figure(bland_altman(pairs), out_dir / "bland_altman.png"))
        )
        figures.append(
            str(cdf_figure(
                cumulative_error_distribution(pairs, bins=args.bins),
                out_dir / "cdf.png",
            ))
        )
        if confusion is not None:
            figures.append(str(confusion_figure(confusion, out_dir / "confusion.png")))

    doc = {
        "predictions": str(args.predictions),
        "groupings": list(args.group or []),
        "bins": args.bins,
        "confusion": bool(confusion),
    }
    _write_run_manifest(out_dir, "evaluate", doc, seed=None)
    summary = summarize(pairs)
    _emit({
        "n": summary.n,
        "mae_l": summary.mae_l,
        "pct_error": summary.pct_error,
        "r2": summary.r2,
        "out": str(out_dir),
        "figures": figures,
    })
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    import csv

    from .util import canonical_json

    labels = args.labels.split(",") if args.labels else None
    if labels and len(labels) != len(args.reports):
        raise ConfigError(
            f"--labels names {len(labels)} runs but {len(args.reports)} report files given"
        )
    runs = []
    for i, report_path in enumerate(args.reports):
        path = Path(report_path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read report {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"report {path} is not valid JSON: {exc}") from exc
        missing = [k for k in ("n", "mae_l", "pct_error", "r2") if k not in doc]
        if missing:
            raise ConfigError(f"report {path} missing fields: {', '.join(missing)}")
        runs.append({
            "label": labels[i] if labels else path.resolve().parent.name,
            "n": doc["n"],
            "mae_l": doc["mae_l"],
            "pct_error": doc["pct_error"],
            "r2": doc["r2"],
        })
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "merged.json").write_text(
        canonical_json({"format_version": 1, "runs": runs}) + "\n", encoding="utf-8"
    )
    with (out_dir / "merged.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(("label", "n", "mae_l", "pct_error", "r2"))
        for run in runs:
            writer.writerow((run["label"], run["n"], repr(run["mae_l"]),
                             repr(run["pct_error"]), repr(run["r2"])))
    figures = []
    if not args.no_figures:
        from .figures import comparison_figure

        figures.append(str(comparison_figure(runs, out_dir / "comparison.png")))
    doc = {"reports": [str(p) for p in args.reports], "labels": labels}
    _write_run_manifest(out_dir, "report", doc, seed=None)
    _emit({"runs": len(runs), "out": str(out_dir), "figures": figures})
    return 0


def _op_gradchecks(seed: int):
    """Finite-difference checks over every primitive, in float64."""
    import numpy as np

    from . import autodiff as ad

    rng = np.random.default_rng(seed)

    def t(shape):
        return ad.Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)

    cases = {
        "matmul": (lambda ps: ad.sum_(ad.matmul(ps["a"], ps["b"])),
                   {"a": t((3, 4)), "b": t((4, 2))}),
        "conv3d": (lambda ps: ad.sum_(ad.conv3d(ps["x"], ps["w"], ps["b"])),
                   {"x": t((2, 4, 4, 4)), "w": t((3, 2, 2, 2, 2)), "b": t((3,))}),
        "softmax_lastdim": (lambda ps: ad.sum_(ad.mul(ps["x"], ad.softmax_lastdim(ps["x"]))),
                            {"x": t((3, 5))}),
        "layer_norm": (lambda ps: ad.sum_(ad.layer_norm(ps["x"], ps["g"], ps["s"])),
                       {"x": t((4, 6)), "g": t((6,)), "s": t((6,))}),
        "relu": (lambda ps: ad.sum_(ad.relu(ps["x"])), {"x": t((4, 4))}),
        "gelu": (lambda ps: ad.sum_(ad.gelu(ps["x"])), {"x": t((4, 4))}),
        "add": (lambda ps: ad.sum_(ad.add(ps["a"], ps["b"])),
                {"a": t((3, 3)), "b": t((3, 3))}),
        "bias_add": (lambda ps: ad.sum_(ad.mul(ad.add(ps["a"], ps["b"]),
                                               ad.add(ps["a"], ps["b"]))),
                     {"a": t((3, 5)), "b": t((5,))}),
        "sub": (lambda ps: ad.sum_(ad.mul(ad.sub(ps["a"], ps["b"]),
                                          ad.sub(ps["a"], ps["b"]))),
                {"a": t((3, 3)), "b": t((3, 3))}),
        "mul": (lambda ps: ad.sum_(ad.mul(ps["a"], ps["b"])),
                {"a": t((2, 6)), "b": t((2, 6))}),
        "scale": (lambda ps: ad.sum_(ad.scale(ps["x"], -1.7)), {"x": t((5,))}),
        "abs": (lambda ps: ad.sum_(ad.abs_(ps["x"])), {"x": t((4, 4))}),
        "mean": (lambda ps: ad.mean_(ad.mul(ps["x"], ps["x"])), {"x": t((3, 7))}),
        "mean_axis0": (lambda ps: ad.sum_(ad.mean_axis0(ad.mul(ps["x"], ps["x"]))),
                       {"x": t((5, 3))}),
        "reshape": (lambda ps: ad.sum_(ad.mul(ad.reshape(ps["x"], (2, 6)),
                                              ad.reshape(ps["x"], (2, 6)))),
                    {"x": t((3, 4))}),
        "transpose": (lambda ps: ad.sum_(ad.mul(ad.transpose(ps["x"], (1, 0)),
                                                ad.transpose(ps["x"], (1, 0)))),
                      {"x": t((3, 4))}),
        "concat_rows": (lambda ps: ad.sum_(ad.mul(ad.concat_rows(ps["a"], ps["b"]),
                                                  ad.concat_rows(ps["a"], ps["b"]))),
                        {"a": t((2, 3)), "b": t((4, 3))}),
    }
    results = {}
    worst = 0.0
    for name, (fn, params) in cases.items():
        report = ad.finite_diff_check(fn, params, seed=seed)
        results[name] = float(report.max_rel_err)
        worst = max(worst, float(report.max_rel_err))
    return results, worst


def cmd_gradcheck(args: argparse.Namespace) -> int:
    import numpy as np

    from . import autodiff as ad
    from .model import DemographicsRecord, ModelConfig, forward, init_params, mae_loss, stack_predictions
    from .volume import NORM255, Volume

    op_results, op_worst = _op_gradchecks(args.seed)

    cfg = ModelConfig.tiny(input_cube=args.cube)
    rng = np.random.default_rng(args.seed)
    vol = Volume(
        rng.uniform(0.0, 255.0, (cfg.input_cube,) * 3).astype(np.float32),
        (1.5, 1.5, 1.5), NORM255,
    )
    demo = DemographicsRecord(60.0, 1, 70.0, 180.0, 1, 10.0, 20.0)
    params = init_params(cfg, args.seed, dtype=np.float64)
    target = np.array([3.5])

    def loss_fn(ps):
        return mae_loss(stack_predictions([forward(vol, demo, ps, cfg)]), target)

    model_report = ad.finite_diff_check(
        loss_fn, params, max_elements_per_param=args.max_elements, seed=args.seed
    )
    worst = max(op_worst, float(model_report.max_rel_err))
    passed = worst < args.tol
    _emit({
        "max_rel_err": worst,
        "ops_max_rel_err": op_worst,
        "model_max_rel_err": float(model_report.max_rel_err),
        "op_results": {k: v for k, v in sorted(op_results.items())},
        "params_checked": len(model_report.entries),
        "excluded_kinks": model_report.excluded_total,
        "tol": args.tol,
        "passed": passed,
    })
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_config_flags(parser: argparse.ArgumentParser, *, training: bool = False) -> None:
    parser.add_argument("--config", help="run config JSON file")
    parser.add_argument(
        "--set", action="append", metavar="PATH=VALUE", default=[],
        help="override a config field by dotted path (e.g. model.embed_dim=64)",
    )
    parser.add_argument("--tiny", action="store_true",
                        help="apply the small-model preset (64-cube, 64-d, 2 blocks)")
    parser.add_argument("--seed", type=int, help="global seed override")
    if training:
        parser.add_argument("--manifest", help="cohort manifest CSV")
        parser.add_argument("--volume-dir", help="root for relative volume paths")
        parser.add_argument("--out", help="output directory")
        parser.add_argument("--epochs", type=int, help="training epoch count")
        parser.add_argument("--target", choices=["fvc", "fev1", "FVC", "FEV1"],
                            help="prediction target")
        parser.add_argument("--arch", choices=["beyondct", "cnn"],
                            help="model architecture")
        group = parser.add_mutually_exclusive_group()
        group.add_argument("--use-demographics", dest="use_demographics",
                           action="store_true", default=None)
        group.add_argument("--no-demographics", dest="use_demographics",
                           action="store_false")
        parser.add_argument("--no-augment", action="store_true",
                            help="train without augmentation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="beyondct",
        description="Lung-function regression from volumetric chest scans.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--deterministic", action="store_true",
        help="force single-threaded numeric kernels",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("import", parents=[common],
                       help="convert a NIfTI-1 file to the canonical volume format")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("preprocess", parents=[common],
                       help="resample to isotropic spacing, pad/crop, normalize")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--spacing", type=float, default=1.5, help="target spacing in mm")
    p.add_argument("--cube", type=int, default=256, help="output cube edge in voxels")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("phantom-gen", parents=[common],
                       help="generate a synthetic cohort with analytic ground truth")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, required=True, help="number of subjects")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cube-mm", dest="cube_mm", type=float, default=None)
    p.add_argument("--spacing", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None, help="liters per liter of air")
    p.add_argument("--beta", type=float, default=None, help="liters per inch of height")
    p.add_argument("--gamma", type=float, default=None, help="mean FEV1/FVC ratio")
    p.add_argument("--sigma", type=float, default=None, help="target noise SD, liters")
    p.add_argument("--raw", action="store_true",
                   help="write raw HU volumes instead of preprocessed ones")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("augment-preview", parents=[common],
                       help="sample a seeded augmentation plan and apply it")
    _add_config_flags(p)
    p.add_argument("--volume", required=True, help="normalized input volume")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("train", parents=[common],
                       help="split, augment, train, and keep the best checkpoint")
    _add_config_flags(p, training=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common],
                       help="run a checkpoint over a manifest, writing predictions CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--volume-dir")
    p.add_argument("--out", required=True, help="predictions CSV path")
    p.add_argument("--reference-coeffs",
                   help="JSON file of reference-equation coefficients; stamps "
                        "actual severity-stage labels into the output")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common],
                       help="compute agreement metrics and emit report + figures")
    p.add_argument("--predictions", required=True, help="predictions CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--group", action="append",
                   choices=["sex", "emphysema", "gold_binary", "smoking"],
                   help="subgroup stratification (repeatable)")
    p.add_argument("--bins", type=int, default=None,
                   help="evenly spaced CDF thresholds (default: observed errors)")
    p.add_argument("--fvc-predictions", help="FVC predictions CSV for staging")
    p.add_argument("--fev1-predictions", help="FEV1 predictions CSV for staging")
    p.add_argument("--manifest", help="manifest CSV (demographics for staging)")
    p.add_argument("--reference-coeffs", help="JSON file of reference coefficients")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common],
                       help="merge several run reports into one comparison")
    p.add_argument("reports", nargs="+", help="report.json files to merge")
    p.add_argument("--labels", help="comma-separated run labels")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference gradient suite (primitives + model)")
    p.add_argument("--tiny", action="store_true", default=True,
                   help=argparse.SUPPRESS)  # the suite always runs the small preset
    p.add_argument("--cube", type=int, default=64, choices=[32, 64],
                   help="model input cube for the full-model check")
    p.add_argument("--max-elements", type=int, default=2,
                   help="sampled elements per parameter tensor")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _pin_threads(getattr(args, "deterministic", False))
    try:
        return args.func(args)
    except BeyondCTError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": "OSError", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
