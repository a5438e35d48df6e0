import csv
import math

import numpy as np
import pytest
import torch
from PIL import Image

from ftmix import harness as H
from ftmix.config import pipeline_config
from ftmix.models import ModelHandle
from ftmix.zoo import ARCHITECTURES


class Constant(torch.nn.Module):
    """Always predicts ``cls``."""

    def __init__(self, cls, n=10):
        super().__init__()
        self.w = torch.nn.Parameter(torch.zeros(1))
        self.cls, self.n = cls, n

    def forward(self, x):
        out = torch.zeros(x.shape[0], self.n) + self.w
        out[:, self.cls] = 1
        return out


class Lookup(torch.nn.Module):
    """Predicts the class stored in pixel (0, 0) times 10."""

    def __init__(self):
        super().__init__()
        self.w = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x):
        cls = (x[:, 0, 0, 0] * 10).round().long()
        return torch.nn.functional.one_hot(cls, 10).float() + self.w


def wrap(net, name, side=32):
    return ModelHandle(net, name=name, input_side=side, mean=(0.0,), std=(1.0,), num_classes=10, candidates=[])


def write_manifest(tmp_path, rows, side=8, mode="L"):
    with open(tmp_path / "m.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_path", "true_label", "target_label"])
        for i, (t, y) in enumerate(rows):
            arr = np.full((side, side), 10 * i, np.uint8) if mode == "L" else np.full((side, side, 3), 10 * i, np.uint8)
            Image.fromarray(arr, mode=mode).save(tmp_path / f"{i}.png")
            w.writerow([f"{i}.png", t, y])
    return tmp_path / "m.csv"


# --- ingestion ----------------------------------------------------------------

def test_load_three_row_manifest(tmp_path):
    ds = H.load_dataset(write_manifest(tmp_path, [(0, 1), (2, 3), (4, 5)]))
    assert len(ds) == 3 and ds.images.shape == (3, 1, 8, 8)
    assert ds.true_labels.tolist() == [0, 2, 4] and ds.target_labels.tolist() == [1, 3, 5]
    assert ds.images[1].max().item() == pytest.approx(10 / 255)


def test_rgb_manifest_and_resize(tmp_path):
    ds = H.load_dataset(write_manifest(tmp_path, [(0, 1)], mode="RGB"), side=4)
    assert ds.images.shape == (1, 3, 4, 4)


def test_label_collision_reports_row(tmp_path):
    with pytest.raises(H.IngestionError, match="row 3"):
        H.load_dataset(write_manifest(tmp_path, [(0, 1), (2, 2)]))


@pytest.mark.parametrize("line,msg", [
    ("0.png,x,1", "row 2"),
    ("missing.png,0,1", "row 2.*not found"),
    (",0,1", "row 2.*empty"),
    ("0.png,-1,1", "row 2.*negative"),
])
def test_malformed_rows(tmp_path, line, msg):
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "0.png")
    (tmp_path / "m.csv").write_text("image_path,true_label,target_label\n" + line + "\n")
    with pytest.raises(H.IngestionError, match=msg):
        H.load_dataset(tmp_path / "m.csv")


def test_missing_manifest_and_bad_header(tmp_path):
    with pytest.raises(H.IngestionError):
        H.load_dataset(tmp_path / "none.csv")
    (tmp_path / "m.csv").write_text("a,b\n1,2\n")
    with pytest.raises(H.IngestionError, match="header"):
        H.load_dataset(tmp_path / "m.csv")


def test_dataset_invariant_enforced_on_construction():
    with pytest.raises(H.IngestionError, match="index 1"):
        H.EvalDataset(torch.zeros(2, 1, 2, 2), torch.tensor([0, 1]), torch.tensor([1, 1]))


# --- success rate -------------------------------------------------------------

def test_success_rate_constant_model():
    m = wrap(Constant(3), "c")
    assert H.targeted_success_rate(torch.rand(5, 1, 4, 4), m, torch.full((5,), 3)) == 1.0
    assert H.targeted_success_rate(torch.rand(5, 1, 4, 4), m, torch.full((5,), 4)) == 0.0


def test_success_rate_manual_count():
    x = torch.zeros(4, 1, 2, 2)
    x[:, 0, 0, 0] = torch.tensor([0.1, 0.2, 0.3, 0.4])  # predictions 1, 2, 3, 4
    y_t = torch.tensor([1, 5, 3, 0])
    assert H.targeted_success_rate(x, wrap(Lookup(), "l"), y_t) == 0.5


def test_success_rate_random_classifier_near_chance():
    class Rand(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(torch.zeros(1))
            self.g = torch.Generator().manual_seed(0)

        def forward(self, x):
            return torch.randn(x.shape[0], 1000, generator=self.g) + self.w

    m = ModelHandle(Rand(), num_classes=1000, candidates=[])
    rate = H.targeted_success_rate(torch.rand(20000, 1, 1, 1), m, torch.zeros(20000, dtype=torch.long))
    assert rate < 0.003  # expectation 0.001


# --- transfer matrix ----------------------------------------------------------

@pytest.fixture(scope="module")
def zoo_models():
    out = []
    for i, a in enumerate(("vggish", "wideshallow")):
        torch.manual_seed(i)
        out.append(ModelHandle(ARCHITECTURES[a](1), name=a, input_side=32, mean=(0.5,), std=(0.25,)))
    return out


@pytest.fixture(scope="module")
def tiny_ds():
    g = torch.Generator().manual_seed(0)
    return H.EvalDataset(torch.rand(4, 1, 32, 32, generator=g), torch.tensor([0, 1, 2, 3]),
                         torch.tensor([5, 6, 7, 8]), id="tiny")


def test_transfer_matrix_cells_and_reproducibility(zoo_models, tiny_ds):
    args = (["MI", "RDI-FTM"], zoo_models[:1], zoo_models, tiny_ds, {"n_iter": 3})
    a = H.run_transfer_matrix(*args, batch_size=3)
    b = H.run_transfer_matrix(*args, batch_size=3)
    assert a.matrix == b.matrix and a.ok
    assert set(a.matrix) == {(x, "vggish", t) for x in ("MI", "RDI-FTM") for t in ("vggish", "wideshallow")}
    assert all(0 <= v <= 1 for v in a.matrix.values())
    assert a.per_image_time[("MI", "vggish")] > 0
    assert a.config_snapshot["RDI-FTM"]["beta"] == 0.01


def test_transfer_matrix_timing_excludes_evaluation(zoo_models, tiny_ds, monkeypatch):
    import time

    slow = []
    real = H.targeted_success_rate

    def slow_rate(*a, **k):
        slow.append(1)
        time.sleep(0.5)
        return real(*a, **k)

    monkeypatch.setattr(H, "targeted_success_rate", slow_rate)
    rep = H.run_transfer_matrix(["MI"], zoo_models[:1], zoo_models, tiny_ds, {"n_iter": 1})
    assert len(slow) == 2
    assert rep.per_image_time[("MI", "vggish")] < 0.5 / len(tiny_ds)


def test_transfer_matrix_marks_failed_cells(zoo_models, tiny_ds):
    class Broken(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(torch.zeros(1))

        def forward(self, x):
            raise RuntimeError("boom")

    broken = ModelHandle(Broken(), name="broken", candidates=[])
    rep = H.run_transfer_matrix(["MI"], zoo_models[:1], [zoo_models[1], broken], tiny_ds, {"n_iter": 1})
    assert math.isnan(rep.matrix[("MI", "vggish", "broken")])
    assert not math.isnan(rep.matrix[("MI", "vggish", "wideshallow")])
    assert not rep.ok and "boom" in rep.failures[0]["error"]
    rep2 = H.run_transfer_matrix(["RDI-FTM"], [broken], zoo_models, tiny_ds, {"n_iter": 1})
    assert all(math.isnan(v) for v in rep2.matrix.values()) and rep2.failures[0]["target"] is None


def test_report_persistence_round_trip(zoo_models, tiny_ds, tmp_path):
    rep = H.run_transfer_matrix(["MI"], zoo_models[:1], zoo_models, tiny_ds, {"n_iter": 2})
    rep.matrix[("MI", "vggish", "ghost")] = float("nan")
    H.save_report(rep, tmp_path)
    back = H.load_report(tmp_path)
    assert back.per_image_time == rep.per_image_time
    assert math.isnan(back.matrix.pop(("MI", "vggish", "ghost")))
    rep.matrix.pop(("MI", "vggish", "ghost"))
    assert back.matrix == rep.matrix
    assert H.config_from_dict(back.config_snapshot["MI"]) == pipeline_config("MI", n_iter=2)
    rows = list(csv.DictReader(open(tmp_path / "matrix.csv")))
    assert len(rows) == 3


def test_black_box_average(tiny_ds):
    rep = H.TransferReport(matrix={("A", "s", "s"): 1.0, ("A", "s", "t"): 0.2, ("A", "s", "u"): 0.4})
    assert rep.black_box_average("A", "s") == pytest.approx(0.3)


# --- ablations ----------------------------------------------------------------

def test_iterations_ablation_cumulative_best_is_monotone(zoo_models, tiny_ds, tmp_path):
    res = H.run_ablation("iterations", [20, 40, 60], pipeline_config("RDI-FTM"), zoo_models[0], zoo_models,
                         tiny_ds, out_dir=tmp_path)
    assert [r["x"] for r in res.rows] == [20, 40, 60]
    for name in ("vggish", "wideshallow", "black_box_avg"):
        best = [r[f"best_{name}"] for r in res.rows]
        assert best == sorted(best)
    assert (tmp_path / "ablation_iterations.csv").exists()
    assert (tmp_path / "plots" / "ablation_iterations.png").exists()


@pytest.mark.parametrize("kind,grid,xs", [
    ("beta_sweep", [0.0, 0.01], [0.0, 0.01]),
    ("p_alpha_grid", [(0.1, 0.75), (1.0, 0.75)], ["p=0.1,alpha_max=0.75", "p=1.0,alpha_max=0.75"]),
    ("ensemble_size", [1, 2], [1, 2]),
])
def test_parameter_sweeps(zoo_models, tiny_ds, tmp_path, kind, grid, xs):
    res = H.run_ablation(kind, grid, pipeline_config("RDI-FTM", n_iter=2), zoo_models[0], zoo_models, tiny_ds,
                         out_dir=tmp_path)
    assert [r["x"] for r in res.rows] == xs
    assert all(0 <= r["black_box_avg"] <= 1 for r in res.rows)
    rows = list(csv.DictReader(open(tmp_path / f"ablation_{kind}.csv")))
    assert len(rows) == len(grid)


def test_ablation_rejects_empty_grid_and_unknown_kind(zoo_models, tiny_ds):
    from ftmix.config import ConfigError

    with pytest.raises(ConfigError):
        H.run_ablation("beta_sweep", [], pipeline_config("RDI-FTM"), zoo_models[0], zoo_models, tiny_ds)
    with pytest.raises(ConfigError):
        H.run_ablation("colour", [1], pipeline_config("RDI-FTM"), zoo_models[0], zoo_models, tiny_ds)
