import json

import pytest
import torch

from ftmix.models import (EnsembleHandle, LayerHandle, ModelHandle, RegistryError, ensemble_logits, load_model,
                          load_models, load_registry, save_registry)
from ftmix.zoo import ARCHITECTURES, DESK_ZOO


def handle(arch="resnetish", seed=0):
    torch.manual_seed(seed)
    return ModelHandle(ARCHITECTURES[arch](1), name=arch, input_side=32, mean=(0.5,), std=(0.25,))


@pytest.mark.parametrize("arch", DESK_ZOO)
def test_identity_interception_is_transparent(arch):
    m = handle(arch)
    x = torch.rand(3, 1, 32, 32)
    hooks = {p.layer_id: (lambda z: z) for p in m.interception_points}
    assert torch.equal(m.predict_with_interception(x, hooks), m.predict_logits(x))


@pytest.mark.parametrize("arch", DESK_ZOO)
def test_zoo_has_eligible_interception_points(arch):
    m = handle(arch)
    shapes = [p.feature_shape for p in m.interception_points]
    assert all(isinstance(p, LayerHandle) for p in m.interception_points)
    assert any(min(s[1:]) * 16 <= 32 for s in shapes)
    assert m.predict_logits(torch.rand(2, 1, 32, 32)).shape == (2, 10)


def test_interception_rewrites_the_layer_input():
    m = handle("vggish")
    x = torch.rand(2, 1, 32, 32)
    zeroed = m.predict_with_interception(x, {"features.12": torch.zeros_like})
    assert not torch.equal(zeroed, m.predict_logits(x))
    # with a zero input the last two convs only see biases: result is input independent
    other = m.predict_with_interception(torch.rand(2, 1, 32, 32), {"features.12": torch.zeros_like})
    assert torch.allclose(zeroed, other)


def test_unknown_layer_and_bad_shape_rejected():
    m = handle()
    with pytest.raises(ValueError):
        m.predict_with_interception(torch.rand(1, 1, 32, 32), {"nope": lambda z: z})
    with pytest.raises(ValueError):
        m.predict_logits(torch.rand(1, 3, 32, 32))


def test_normalization_happens_inside_the_handle():
    net = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(4, 2, bias=False))
    net[1].weight.data = torch.tensor([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    m = ModelHandle(net, input_side=2, mean=(0.5,), std=(0.25,), num_classes=2, candidates=[])
    out = m.predict_logits(torch.full((1, 1, 2, 2), 0.75))
    assert out.tolist() == [[1.0, 1.0]]


def test_forward_call_counting_and_predict():
    m = handle()
    m.forward_calls = 0
    pred = m.predict(torch.rand(5, 1, 32, 32), batch_size=2)
    assert pred.shape == (5,) and m.forward_calls == 3


def test_parameters_are_frozen():
    m = handle()
    assert not any(p.requires_grad for p in m.net.parameters())
    assert not m.net.training


def test_ensemble_logits_is_mean_of_copies():
    m = handle("vggish")
    x = torch.rand(2, 1, 32, 32)
    ens = EnsembleHandle(m, 2)
    scale = {"features.12": lambda z: 2 * z}
    out = ensemble_logits(ens, x, [scale, {}])
    ref = (m.predict_with_interception(x, scale) + m.predict_logits(x)) / 2
    assert torch.allclose(out, ref)
    assert torch.equal(ensemble_logits(EnsembleHandle(m, 1), x, [{}]), m.predict_logits(x))
    with pytest.raises(ValueError):
        ensemble_logits(ens, x, [{}])
    with pytest.raises(ValueError):
        EnsembleHandle(m, 0)


def test_registry_round_trip(tmp_path):
    m = handle("mobilenetish")
    torch.save(m.net.state_dict(), tmp_path / "w.pt")
    save_registry([{"name": "mob", "arch": "desk:mobilenetish", "weights": "w.pt", "input_side": 32,
                    "mean": [0.5], "std": [0.25], "num_classes": 10}], tmp_path / "reg.json")
    entries = load_registry(tmp_path / "reg.json")
    assert entries["mob"]["weights"] == str(tmp_path / "w.pt")
    (loaded,) = load_models(tmp_path / "reg.json", ["mob"])
    x = torch.rand(2, 1, 32, 32)
    assert torch.equal(loaded.predict_logits(x), m.predict_logits(x))
    with pytest.raises(RegistryError, match="mob"):
        load_models(tmp_path / "reg.json", ["missing"])


def test_registry_errors(tmp_path):
    with pytest.raises(RegistryError):
        load_registry(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(RegistryError):
        load_registry(tmp_path / "bad.json")
    with pytest.raises(RegistryError):
        load_model({"name": "x", "arch": "desk:vggish", "weights": str(tmp_path / "none.pt")})
    (tmp_path / "w.pt").write_bytes(b"junk")
    with pytest.raises(RegistryError):
        load_model({"name": "x", "arch": "bogus:net", "weights": str(tmp_path / "w.pt")})
    (tmp_path / "r.json").write_text(json.dumps({"models": [{"name": "x"}]}))
    assert "x" in load_registry(tmp_path / "r.json")
