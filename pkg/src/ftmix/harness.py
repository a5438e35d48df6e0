"""Evaluation datasets, transfer matrices, ablation sweeps and run persistence."""

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from PIL import Image

from .attack import TargetedTransferAttack, run_attack
from .config import PIPELINES, AttackConfig, ConfigError, TransformParams, pipeline_config

logger = logging.getLogger(__name__)

ABLATIONS = ("iterations", "beta_sweep", "p_alpha_grid", "ensemble_size")


class IngestionError(ValueError):
    """Bad manifest: the message names the file and, when known, the row."""


@dataclass
class EvalDataset:
    images: torch.Tensor
    true_labels: torch.Tensor
    target_labels: torch.Tensor
    id: str = "dataset"
    paths: list = field(default_factory=list)

    def __post_init__(self):
        n = self.images.shape[0]
        if self.true_labels.shape != (n,) or self.target_labels.shape != (n,):
            raise IngestionError(f"{self.id}: label vectors must have length {n}")
        same = (self.true_labels == self.target_labels).nonzero().flatten().tolist()
        if same:
            raise IngestionError(f"{self.id}: target label equals true label at index {same[0]}")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, n):
        n = min(n, len(self))
        return replace(self, images=self.images[:n], true_labels=self.true_labels[:n],
                       target_labels=self.target_labels[:n], paths=self.paths[:n])


def _decode(path, side):
    with Image.open(path) as img:
        img = img.convert("L" if img.mode in ("L", "1", "I;16") else "RGB")
        if side is not None and img.size != (side, side):
            img = img.resize((side, side), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(arr))


def load_dataset(manifest_path, side=None, name=None):
    """Read a ``image_path,true_label,target_label`` CSV manifest.

    Image paths are relative to the manifest. Rows are numbered as in the
    file (header is row 1). ``side`` resizes every image to ``side x side``.
    """
    if not os.path.exists(manifest_path):
        raise IngestionError(f"{manifest_path}: manifest not found")
    base = os.path.dirname(os.path.abspath(manifest_path))
    images, true, target, paths = [], [], [], []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"image_path", "true_label", "target_label"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise IngestionError(f"{manifest_path}: header must contain {sorted(need)}, got {reader.fieldnames}")
        for row_no, row in enumerate(reader, start=2):
            where = f"{manifest_path}: row {row_no}"
            try:
                t, y = int(row["true_label"]), int(row["target_label"])
            except (TypeError, ValueError):
                raise IngestionError(f"{where}: labels must be integers, got {row}") from None
            if t < 0 or y < 0:
                raise IngestionError(f"{where}: negative label")
            if t == y:
                raise IngestionError(f"{where}: target label {y} equals true label")
            rel = (row["image_path"] or "").strip()
            if not rel:
                raise IngestionError(f"{where}: empty image_path")
            path = rel if os.path.isabs(rel) else os.path.join(base, rel)
            if not os.path.exists(path):
                raise IngestionError(f"{where}: image not found: {rel}")
            try:
                img = _decode(path, side)
            except OSError as exc:
                raise IngestionError(f"{where}: cannot decode {rel}: {exc}") from None
            if images and img.shape != images[0].shape:
                raise IngestionError(f"{where}: image shape {tuple(img.shape)} differs from {tuple(images[0].shape)}")
            images.append(img)
            true.append(t)
            target.append(y)
            paths.append(rel)
    if not images:
        raise IngestionError(f"{manifest_path}: no rows")
    return EvalDataset(torch.stack(images), torch.tensor(true), torch.tensor(target),
                       id=name or os.path.splitext(os.path.basename(manifest_path))[0], paths=paths)


def targeted_success_rate(x_adv, target_model, y_t):
    """Fraction of ``x_adv`` that ``target_model`` classifies as ``y_t``."""
    y_t = torch.as_tensor(y_t).long()
    if y_t.shape != (x_adv.shape[0],):
        raise ValueError(f"expected {x_adv.shape[0]} target labels, got shape {tuple(y_t.shape)}")
    if len(y_t) == 0:
        return 0.0
    pred = target_model.predict(x_adv)
    return float((pred.cpu() == y_t.cpu()).float().mean())


# --- transfer matrix ----------------------------------------------------------

@dataclass
class TransferReport:
    """Success rates keyed by ``(attack, surrogate, target)``.

    ``per_image_time`` is keyed by ``(attack, surrogate)``; failed cells hold
    NaN and are listed in ``failures``.
    """

    matrix: dict = field(default_factory=dict)
    per_image_time: dict = field(default_factory=dict)
    config_snapshot: dict = field(default_factory=dict)
    per_iteration_curves: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    dataset: str = ""
    n_images: int = 0

    @property
    def ok(self):
        return not self.failures

    def cell(self, attack, surrogate, target):
        return self.matrix[(attack, surrogate, target)]

    def black_box_average(self, attack, surrogate):
        vals = [v for (a, s, t), v in self.matrix.items() if a == attack and s == surrogate and t != s]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def attacks(self):
        return list(dict.fromkeys(a for a, _, _ in self.matrix))

    def to_dict(self):
        return {
            "dataset": self.dataset,
            "n_images": self.n_images,
            "matrix": [{"attack": a, "surrogate": s, "target": t, "success": _num(v)}
                       for (a, s, t), v in self.matrix.items()],
            "per_image_time": [{"attack": a, "surrogate": s, "seconds": v}
                               for (a, s), v in self.per_image_time.items()],
            "config_snapshot": self.config_snapshot,
            "per_iteration_curves": [{"attack": a, "surrogate": s, "target": t, "curve": c}
                                     for (a, s, t), c in self.per_iteration_curves.items()],
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            matrix={(r["attack"], r["surrogate"], r["target"]): float("nan") if r["success"] is None else r["success"]
                    for r in d.get("matrix", [])},
            per_image_time={(r["attack"], r["surrogate"]): r["seconds"] for r in d.get("per_image_time", [])},
            config_snapshot=d.get("config_snapshot", {}),
            per_iteration_curves={(r["attack"], r["surrogate"], r["target"]): r["curve"]
                                  for r in d.get("per_iteration_curves", [])},
            failures=list(d.get("failures", [])),
            dataset=d.get("dataset", ""),
            n_images=d.get("n_images", 0),
        )


def _num(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def config_to_dict(cfg):
    d = asdict(cfg)
    d["transforms"] = list(cfg.transforms)
    return d


def config_from_dict(d):
    d = dict(d)
    tp = TransformParams(**d.pop("transform_params", {}))
    d["transforms"] = tuple(d.get("transforms", ()))
    return AttackConfig(**d, transform_params=tp)


def resolve_attacks(attacks, overrides=None):
    """Turn names or ``(label, AttackConfig)`` pairs into ``[(label, cfg)]``.

    ``overrides`` (dict) applies to every named pipeline.
    """
    out = []
    for a in attacks:
        if isinstance(a, str):
            if a not in PIPELINES:
                raise ConfigError(f"run.attack: unknown attack {a!r}")
            out.append((a, pipeline_config(a, **(overrides or {}))))
        else:
            label, cfg = a
            out.append((label, cfg.validate()))
    return out


def evaluate_targets(x_adv, y_t, targets, max_workers=1):
    """Success rate on every target; failures map to ``(nan, message)``.

    Targets only read the fixed adversarial set, so they may run in threads.
    """
    def one(model):
        try:
            return targeted_success_rate(x_adv, model, y_t), None
        except Exception as exc:  # a broken target must not sink the whole matrix
            logger.exception("evaluation on %s failed", model.name)
            return float("nan"), f"{type(exc).__name__}: {exc}"

    if max_workers > 1 and len(targets) > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            results = list(pool.map(one, targets))
    else:
        results = [one(m) for m in targets]
    return {m.name: r for m, r in zip(targets, results)}


def run_transfer_matrix(attacks, surrogates, targets, dataset, cfg=None, batch_size=64,
                        max_workers=1, adv_sink=None):
    """Craft once per (attack, surrogate) and evaluate on every target.

    Arguments:
        attacks: pipeline names or ``(label, AttackConfig)`` pairs.
        surrogates, targets: lists of ModelHandle.
        dataset (EvalDataset)
        cfg (dict | None): overrides applied to named pipelines.
        adv_sink (callable | None): ``adv_sink(label, surrogate_name, x_adv)``
            receives each crafted set (used to persist examples).

    Per-image time covers crafting only.
    """
    report = TransferReport(dataset=dataset.id, n_images=len(dataset))
    for label, acfg in resolve_attacks(attacks, cfg):
        report.config_snapshot[label] = config_to_dict(acfg)
        for sur in surrogates:
            try:
                est = TargetedTransferAttack.from_config(sur, acfg, attack=label if label in PIPELINES else "custom",
                                                         batch_size=batch_size)
                x_adv = est.fit_transform(dataset.images, dataset.target_labels)
            except Exception as exc:
                if isinstance(exc, ConfigError):
                    raise
                logger.exception("crafting %s on %s failed", label, sur.name)
                msg = f"{type(exc).__name__}: {exc}"
                report.failures.append({"attack": label, "surrogate": sur.name, "target": None, "error": msg})
                for t in targets:
                    report.matrix[(label, sur.name, t.name)] = float("nan")
                continue
            report.per_image_time[(label, sur.name)] = est.time_per_image_
            if adv_sink is not None:
                adv_sink(label, sur.name, x_adv)
            for name, (rate, err) in evaluate_targets(x_adv, dataset.target_labels, targets, max_workers).items():
                report.matrix[(label, sur.name, name)] = rate
                if err:
                    report.failures.append({"attack": label, "surrogate": sur.name, "target": name, "error": err})
    return report


# --- ablations ----------------------------------------------------------------

@dataclass
class AblationResult:
    kind: str
    rows: list
    columns: tuple

    def series(self, target=None):
        """``{x: success}`` for one target, or the black-box average when ``target`` is None."""
        key = "black_box_avg" if target is None else target
        return {r["x"]: r[key] for r in self.rows}


def _ablation_points(kind, grid, base):
    if kind == "beta_sweep":
        return [(b, replace(base, beta=float(b))) for b in grid]
    if kind == "p_alpha_grid":
        pts = []
        for item in grid:
            p, a = item
            pts.append((f"p={p},alpha_max={a}", replace(base, p=float(p), alpha_max=float(a))))
        return pts
    if kind == "ensemble_size":
        return [(int(k), replace(base, ensemble_k=int(k))) for k in grid]
    raise ConfigError(f"ablate.kind: unknown ablation {kind!r}; choose from {ABLATIONS}")


def run_ablation(kind, grid, cfg, surrogate, targets, dataset, batch_size=64, out_dir=None):
    """Sweep one parameter (or the ``(p, alpha_max)`` pairs) with everything else fixed.

    ``iterations`` crafts once with ``n_iter = max(grid)`` and scores the
    checkpoints saved every 20 iterations; its rows also carry the
    cumulative best success per target. Writes ``ablation_<kind>.csv`` and a
    plot under ``out_dir`` when given.
    """
    grid = list(grid)
    if not grid:
        raise ConfigError(f"ablate.grid: empty grid for {kind}")
    cfg = cfg.validate()
    names = [t.name for t in targets]
    rows = []
    black = [n for n in names if n != surrogate.name] or names

    def score(x_adv):
        rates = {n: r for n, (r, _) in evaluate_targets(x_adv, dataset.target_labels, targets).items()}
        rates["black_box_avg"] = float(np.mean([rates[n] for n in black]))
        return rates

    if kind == "iterations":
        steps = sorted({int(g) for g in grid})
        if any(s <= 0 for s in steps):
            raise ConfigError("ablate.grid: iteration counts must be positive")
        run_cfg = replace(cfg, n_iter=max(steps))
        ckpts_all = {}
        for b, start in enumerate(range(0, len(dataset), batch_size)):
            sl = slice(start, start + batch_size)
            ck = {}
            run_attack(surrogate, dataset.images[sl], dataset.target_labels[sl], run_cfg, batch_index=b, checkpoints=ck)
            for it, x in ck.items():
                ckpts_all.setdefault(it, []).append(x)
        best = {}
        for it in sorted(ckpts_all):
            rates = score(torch.cat(ckpts_all[it]))
            row = {"x": it, **rates}
            for n in names + ["black_box_avg"]:
                best[n] = max(best.get(n, 0.0), rates[n])
                row[f"best_{n}"] = best[n]
            if it in steps or not steps:
                rows.append(row)
        columns = ("x", *names, "black_box_avg", *[f"best_{n}" for n in names + ["black_box_avg"]])
    else:
        for x, point in _ablation_points(kind, grid, cfg):
            est = TargetedTransferAttack.from_config(surrogate, point, batch_size=batch_size)
            adv = est.fit_transform(dataset.images, dataset.target_labels)
            rows.append({"x": x, **score(adv), "time_per_image": est.time_per_image_})
        columns = ("x", *names, "black_box_avg", "time_per_image")
    result = AblationResult(kind, rows, columns)
    if out_dir is not None:
        save_ablation(result, out_dir)
    return result


# --- persistence --------------------------------------------------------------

def save_report(report, run_dir):
    """Write ``report.json`` and ``matrix.csv``; returns the JSON path."""
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, "report.json")
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    with open(os.path.join(run_dir, "matrix.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attack", "surrogate", "target", "success", "per_image_time"])
        for (a, s, t), v in report.matrix.items():
            w.writerow([a, s, t, "" if math.isnan(v) else repr(v), repr(report.per_image_time.get((a, s), float("nan")))])
    return path


def load_report(run_dir):
    path = os.path.join(run_dir, "report.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{run_dir}: no report.json")
    with open(path) as fh:
        return TransferReport.from_dict(json.load(fh))


def save_ablation(result, out_dir):
    os.makedirs(os.path.join(out_dir, "plots"), exist_ok=True)
    csv_path = os.path.join(out_dir, f"ablation_{result.kind}.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(result.columns), extrasaction="ignore")
        w.writeheader()
        w.writerows(result.rows)
    plot_ablation(result, os.path.join(out_dir, "plots", f"ablation_{result.kind}.png"))
    return csv_path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_ablation(result, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = [str(r["x"]) for r in result.rows]
    targets = [c for c in result.columns if c not in ("x", "time_per_image") and not c.startswith("best_")]
    for name in targets:
        style = "k-o" if name == "black_box_avg" else "--."
        ax.plot(xs, [100 * r[name] for r in result.rows], style, label=name)
    ax.set_xlabel(result.kind)
    ax.set_ylabel("targeted success (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_cost_scatter(points, path):
    """``points``: list of ``(label, seconds_per_image, avg_success)``."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, sec, acc in points:
        ax.scatter([sec], [100 * acc])
        ax.annotate(label, (sec, 100 * acc), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("seconds per image")
    ax.set_ylabel("black-box targeted success (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_matrix(report, attack, path):
    plt = _pyplot()
    surs = list(dict.fromkeys(s for a, s, _ in report.matrix if a == attack))
    tgts = list(dict.fromkeys(t for a, _, t in report.matrix if a == attack))
    grid = np.array([[report.matrix.get((attack, s, t), float("nan")) for t in tgts] for s in surs])
    fig, ax = plt.subplots(figsize=(1 + 0.8 * len(tgts), 1 + 0.6 * len(surs)))
    ax.imshow(grid, vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(len(tgts)), tgts, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(len(surs)), surs, fontsize=7)
    for i in range(len(surs)):
        for j in range(len(tgts)):
            ax.text(j, i, f"{100 * grid[i, j]:.0f}", ha="center", va="center", color="w", fontsize=7)
    ax.set_title(attack, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
