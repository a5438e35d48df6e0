"""Command-line driver: ``ftmix {attack,evaluate,ablate,prepare-desk,report}``.

Exit codes: 0 success, 2 configuration or input error, 3 model/registry
error, 4 evaluation or training failure. ``FTMIX_DEVICE`` selects the
torch device (default ``cpu``).
"""

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from dataclasses import replace
from importlib import resources

import numpy as np
import torch

from . import config as C
from . import harness as H
from .attack import TargetedTransferAttack
from .models import CapabilityError, RegistryError, load_models, load_registry

logger = logging.getLogger("ftmix")

EXIT_OK, EXIT_CONFIG, EXIT_MODEL, EXIT_EVAL = 0, 2, 3, 4
DEVICE_ENV = "FTMIX_DEVICE"
PRESETS = ("paper", "desk")


class EvaluationFailure(RuntimeError):
    pass


def resolve_device():
    name = os.environ.get(DEVICE_ENV, "cpu")
    try:
        dev = torch.device(name)
    except RuntimeError:
        raise C.ConfigError(f"{DEVICE_ENV}: invalid device {name!r}") from None
    if dev.type == "cuda" and not torch.cuda.is_available():
        raise C.ConfigError(f"{DEVICE_ENV}: {name} requested but CUDA is unavailable")
    return dev


def preset_text(name):
    if name not in PRESETS:
        raise C.ConfigError(f"--preset: unknown preset {name!r}; choose from {PRESETS}")
    return resources.files("ftmix").joinpath(f"presets/{name}.cfg").read_text()


def load_run_config(args):
    """Config file (or preset) plus ``--set`` / ``--seed`` / ``--mode`` overrides."""
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"attack.seed={args.seed}")
    if getattr(args, "mode", None):
        overrides.append(f"run.mode={args.mode}")
    if getattr(args, "config", None) and getattr(args, "preset", None):
        raise C.ConfigError("--preset: give either a config file or a preset, not both")
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise C.ConfigError(f"{args.config}: config file not found")
        with open(args.config) as fh:
            text = fh.read()
    else:
        text = preset_text(getattr(args, "preset", None) or "paper")
    return C.loads(text, overrides)


def _models(run, names, device):
    models = load_models(run.registry, names)
    return [m.to(device) for m in models]


def _dataset(run, side):
    ds = H.load_dataset(run.dataset, side=side)
    return ds.subset(run.limit) if run.limit else ds


def run_id(run):
    return f"{run.attack}-{run.surrogate}-s{run.attack_config.seed}"


def export_png(x_adv, out_dir):
    """Write 8-bit PNGs; quantization may move pixels outside the budget."""
    from PIL import Image

    warnings.warn("PNG export quantizes to 8 bits; exported images may leave the L-inf ball "
                  "and are not used by 'evaluate'", stacklevel=2)
    os.makedirs(out_dir, exist_ok=True)
    arr = (x_adv.clamp(0, 1) * 255).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
    for i, a in enumerate(arr):
        img = Image.fromarray(a[..., 0] if a.shape[-1] == 1 else a)
        img.save(os.path.join(out_dir, f"{i:04d}.png"))


# --- commands -----------------------------------------------------------------

def cmd_attack(args):
    run = load_run_config(args)
    if not run.surrogate:
        raise C.ConfigError("run.surrogate: required")
    device = resolve_device()
    (sur,) = _models(run, [run.surrogate], device)
    ds = _dataset(run, sur.input_side)
    est = TargetedTransferAttack.from_config(sur, run.attack_config, attack=run.attack, batch_size=run.batch_size)
    x_adv = est.fit_transform(ds.images, ds.target_labels)
    out = args.out or os.path.join(run.output_dir, run_id(run))
    os.makedirs(out, exist_ok=True)
    C.save(run, os.path.join(out, "config.cfg"))
    torch.save({"x_adv": x_adv.cpu(), "true_labels": ds.true_labels, "target_labels": ds.target_labels,
                "paths": ds.paths, "dataset": ds.id}, os.path.join(out, "adv.pt"))
    white = H.targeted_success_rate(x_adv, sur, ds.target_labels)
    summary = {
        "attack": run.attack, "surrogate": sur.name, "n_images": len(ds),
        "per_image_time": est.time_per_image_, "white_box_success": white,
        "final_loss": float(np.mean([c[-1] for c in est.loss_curves_])),
        "loss_curves": est.loss_curves_, "config": H.config_to_dict(est.config_),
        "max_abs_perturbation": float((x_adv - ds.images).abs().max()),
    }
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    if args.png:
        export_png(x_adv, os.path.join(out, "png"))
    print(f"{run.attack} on {sur.name}: white-box success {100 * white:.1f}% "
          f"({est.time_per_image_:.3f} s/image) -> {out}")
    return EXIT_OK


def evaluate_run(run_dir, target_names, registry=None, max_workers=1):
    """Score stored examples on ``target_names`` and merge into ``report.json``.

    Returns ``(report, overwritten_cells)``.
    """
    cfg_path, adv_path = os.path.join(run_dir, "config.cfg"), os.path.join(run_dir, "adv.pt")
    for p in (cfg_path, adv_path):
        if not os.path.exists(p):
            raise FileNotFoundError(f"{run_dir}: missing artifact {os.path.basename(p)} (run 'attack' first)")
    run = C.load(cfg_path)
    reg = registry or run.registry
    entries = load_registry(reg)
    unknown = [n for n in target_names if n not in entries]
    if unknown:
        raise RegistryError(f"unknown target(s) {unknown}; registry {reg} has {sorted(entries)}")
    data = torch.load(adv_path, weights_only=True)
    device = resolve_device()
    targets = [m.to(device) for m in load_models(reg, target_names)]
    try:
        report = H.load_report(run_dir)
    except FileNotFoundError:
        report = H.TransferReport(dataset=data["dataset"], n_images=len(data["x_adv"]))
    summary_path = os.path.join(run_dir, "summary.json")
    if os.path.exists(summary_path):
        with open(summary_path) as fh:
            summary = json.load(fh)
        report.per_image_time[(run.attack, run.surrogate)] = summary["per_image_time"]
    report.config_snapshot[run.attack] = H.config_to_dict(run.attack_config)
    overwritten = []
    report.failures = [f for f in report.failures if f.get("target") not in target_names]
    for name, (rate, err) in H.evaluate_targets(data["x_adv"], data["target_labels"], targets, max_workers).items():
        key = (run.attack, run.surrogate, name)
        if key in report.matrix:
            overwritten.append(name)
        report.matrix[key] = rate
        if err:
            report.failures.append({"attack": run.attack, "surrogate": run.surrogate, "target": name, "error": err})
    H.save_report(report, run_dir)
    return report, overwritten


def cmd_evaluate(args):
    names = [t for t in args.targets.split(",") if t]
    if not names:
        raise C.ConfigError("--targets: at least one target model required")
    report, overwritten = evaluate_run(args.run_dir, names, args.registry, args.workers)
    if overwritten:
        logger.warning("re-evaluated cells overwritten: %s", ", ".join(overwritten))
    for (a, s, t), v in report.matrix.items():
        if t in names:
            flag = " (overwritten)" if t in overwritten else ""
            print(f"{a} {s} -> {t}: {100 * v:.1f}%{flag}")
    if report.failures:
        raise EvaluationFailure(f"{len(report.failures)} failed cell(s): {report.failures}")
    return EXIT_OK


def parse_grid(kind, text):
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise C.ConfigError("--grid: empty grid")
    try:
        if kind == "p_alpha_grid":
            return [tuple(float(v) for v in s.split(":")) for s in items]
        if kind in ("iterations", "ensemble_size"):
            return [int(s) for s in items]
        return [float(s) for s in items]
    except ValueError:
        raise C.ConfigError(f"--grid: cannot parse {text!r} for {kind}") from None


def cmd_ablate(args):
    run = load_run_config(args)
    grid = parse_grid(args.kind, args.grid)
    if args.kind == "p_alpha_grid" and any(len(g) != 2 for g in grid):
        raise C.ConfigError("--grid: p_alpha_grid entries look like p:alpha_max")
    device = resolve_device()
    names = list(dict.fromkeys([run.surrogate, *run.targets]))
    models = _models(run, names, device)
    ds = _dataset(run, models[0].input_side)
    out = args.out or os.path.join(run.output_dir, f"ablate-{args.kind}-{run.surrogate}-s{run.attack_config.seed}")
    os.makedirs(out, exist_ok=True)
    C.save(run, os.path.join(out, "config.cfg"))
    res = H.run_ablation(args.kind, grid, run.attack_config, models[0], models, ds, run.batch_size, out_dir=out)
    for r in res.rows:
        print(f"{args.kind} {r['x']}: black-box {100 * r['black_box_avg']:.1f}%")
    return EXIT_OK


def cmd_prepare_desk(args):
    from .desk import prepare_desk

    info = prepare_desk(args.out, seed=args.seed, n_eval=args.n_eval, epochs=args.epochs)
    for name, acc in info["accuracy"].items():
        print(f"{name}: test accuracy {100 * acc:.1f}%")
    for (a, b), v in info["disagreement"].items():
        print(f"disagreement {a}/{b} {100 * v:.1f}%")
    print(f"most distinct triple {', '.join(info['triple'])}: min pairwise {100 * info['triple_disagreement']:.1f}%")
    print(f"registry {info['registry']}\nmanifest {info['manifest']}")
    return EXIT_OK


def report_points(reports):
    """Scatter points ``(label, seconds/image, black-box average)``, one per (run, attack, surrogate)."""
    pts = []
    for tag, rep in reports:
        for (a, s), sec in rep.per_image_time.items():
            label = f"{a}/{s}" if len(reports) == 1 else f"{tag}:{a}/{s}"
            pts.append((label, sec, rep.black_box_average(a, s)))
    return pts


def cmd_report(args):
    reports = []
    for d in args.run_dirs:
        reports.append((os.path.basename(os.path.normpath(d)), H.load_report(d)))
    out = args.out
    os.makedirs(os.path.join(out, "plots"), exist_ok=True)
    pts = report_points(reports)
    with open(os.path.join(out, "scatter.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "per_image_time", "black_box_avg"])
        for label, sec, acc in pts:
            w.writerow([label, repr(sec), repr(acc)])
    H.plot_cost_scatter(pts, os.path.join(out, "plots", "cost_vs_success.png"))
    for tag, rep in reports:
        for a in rep.attacks():
            H.plot_matrix(rep, a, os.path.join(out, "plots", f"matrix_{tag}_{a}.png"))
    for d in args.run_dirs:
        for fname in sorted(os.listdir(d)):
            if fname.startswith("ablation_") and fname.endswith(".csv"):
                with open(os.path.join(d, fname), newline="") as fh:
                    rows = [{k: _maybe_num(v) for k, v in r.items()} for r in csv.DictReader(fh)]
                    cols = tuple(rows[0]) if rows else ("x",)
                kind = fname[len("ablation_"):-4]
                H.plot_ablation(H.AblationResult(kind, rows, cols),
                                os.path.join(out, "plots", f"{os.path.basename(os.path.normpath(d))}_{fname[:-4]}.png"))
    for label, sec, acc in pts:
        print(f"{label}: {100 * acc:.1f}% black-box, {sec:.3f} s/image")
    return EXIT_OK


def _maybe_num(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return v


# --- entry point --------------------------------------------------------------

def _config_args(p):
    p.add_argument("config", nargs="?", help="run config file (.cfg)")
    p.add_argument("--preset", choices=PRESETS, help="start from a shipped preset instead of a file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    p.add_argument("--seed", type=int, help="shorthand for --set attack.seed=N")
    p.add_argument("--mode", choices=("desk", "full"))


def build_parser():
    parser = argparse.ArgumentParser(prog="ftmix", description="Targeted transfer attacks with feature tuning mixup.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", help="craft adversarial examples on the configured surrogate")
    _config_args(p)
    p.add_argument("--out", help="run directory (default: <output_dir>/<attack>-<surrogate>-s<seed>)")
    p.add_argument("--png", action="store_true", help="also export 8-bit PNGs (lossy)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="score a run's examples on target models")
    p.add_argument("run_dir")
    p.add_argument("--targets", required=True, help="comma-separated registry names")
    p.add_argument("--registry", help="registry path (default: the run's)")
    p.add_argument("--workers", type=int, default=1, help="evaluate targets concurrently")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="parameter sweep on one surrogate")
    _config_args(p)
    p.add_argument("--kind", required=True, choices=H.ABLATIONS)
    p.add_argument("--grid", required=True, help="e.g. 0,0.01,0.02 or 0.1:0.75,1.0:0.75 for p_alpha_grid")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("prepare-desk", help="train the desk model zoo and write registry + manifest")
    p.add_argument("--out", default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-eval", type=int, default=256)
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default: the desk recipe)")
    p.set_defaults(func=cmd_prepare_desk)

    p = sub.add_parser("report", help="cost/success scatter, matrices and ablation plots")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (C.ConfigError, H.IngestionError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RegistryError, CapabilityError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except EvaluationFailure as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except Exception as exc:
        from .desk import TrainingError

        if isinstance(exc, (TrainingError, FloatingPointError)):
            print(f"failed: {exc}", file=sys.stderr)
            return EXIT_EVAL
        raise


if __name__ == "__main__":
    sys.exit(main())
