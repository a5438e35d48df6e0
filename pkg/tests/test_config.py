import json
import pathlib
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftmix import config as C

GOLDEN = pathlib.Path(__file__).parent / "golden" / "pipelines.json"


def test_named_pipelines_match_golden_file():
    golden = json.loads(GOLDEN.read_text())
    assert set(golden) == set(C.PIPELINES)
    for name, want in golden.items():
        cfg = C.pipeline_config(name)
        got = {"transforms": list(cfg.transforms), "feature_mixup": cfg.feature_mixup,
               "beta": cfg.beta, "ensemble_k": cfg.ensemble_k}
        assert got == want, name
        assert cfg.transforms[-1] == "TI"


def test_paper_preset_values():
    run = C.paper_preset()
    a = run.attack_config
    assert run.attack == "RDI-FTM"
    assert (a.beta, a.p, a.alpha_max, a.mu) == (0.01, 0.1, 0.75, 1.0)
    assert a.epsilon == 16 / 255 and a.eta == 2 / 255 and a.n_iter == 300
    snap = C.dumps(run)
    for line in ("beta = 0.01", "p = 0.1", "alpha_max = 0.75", "mu = 1.0",
                 f"epsilon = {16 / 255!r}", f"eta = {2 / 255!r}"):
        assert line in snap


def test_preset_leaves_pipeline_keys_to_the_attack_name():
    text = C.dumps(C.paper_preset())
    base = C.paper_preset()
    for name in C.PIPELINES:
        run = C.loads(_without_pipeline_keys(text), [f"run.attack={name}"])
        assert run.attack_config == replace(C.pipeline_config(name), n_iter=base.attack_config.n_iter), name


def _without_pipeline_keys(text):
    keep = [l for l in text.splitlines() if l.split("=")[0].strip() not in ("beta", "transforms", "feature_mixup",
                                                                           "ensemble_k")]
    return "\n".join(keep)


def test_overrides_and_fractions():
    run = C.loads("[attack]\nepsilon = 8/255\n", ["attack.n_iter=7", "run.attack=RDI-FTM-E", "transforms.ti_sigma=1.5"])
    assert run.attack_config.epsilon == 8 / 255
    assert run.attack_config.n_iter == 7 and run.attack_config.ensemble_k == 2
    assert run.attack_config.transform_params.ti_sigma == 1.5


@pytest.mark.parametrize("text,overrides,path", [
    ("[attack]\nepsilon = 2\n", [], "attack.epsilon"),
    ("[attack]\nn_iter = ten\n", [], "attack.n_iter"),
    ("[attack]\nbogus = 1\n", [], "attack.bogus"),
    ("[attack]\ntransforms = RDI, XYZ\n", [], "attack.transforms"),
    ("[transforms]\nti_kernel_size = 4\n", [], "transforms.ti_kernel_size"),
    ("[run]\nattack = FGSM\n", [], "run.attack"),
    ("[run]\nmode = huge\n", [], "run.mode"),
    ("", ["run.attack=RDI-FTM-E", "attack.ensemble_k=1"], "attack.ensemble_k"),
    ("", ["nonsense"], "nonsense"),
    ("[extra]\na = 1\n", [], "extra"),
])
def test_errors_name_the_field(text, overrides, path):
    with pytest.raises(C.ConfigError) as info:
        C.loads(text, overrides)
    assert str(info.value).startswith(path)


floats01 = st.floats(0, 1, allow_nan=False)
run_configs = st.builds(
    lambda attack, eps, frac, n, beta, p, am, k, seed, sigma, tr, limit, fm: C.RunConfig(
        attack=attack,
        attack_config=C.AttackConfig(epsilon=eps, eta=eps * frac, n_iter=n, beta=beta, p=p, alpha_max=am,
                                     ensemble_k=k if attack != "RDI-FTM-E" else max(k, 2), seed=seed,
                                     transforms=tr, feature_mixup=fm,
                                     transform_params=C.TransformParams(ti_sigma=sigma)),
        dataset="d/manifest.csv", registry="r.json", surrogate="s", targets=("a", "b"), limit=limit),
    st.sampled_from(sorted(C.PIPELINES) + ["custom"]),
    st.floats(1e-6, 1, allow_nan=False), st.floats(1e-3, 1, allow_nan=False),
    st.integers(1, 1000), st.floats(0, 10, allow_nan=False), floats01, floats01,
    st.integers(1, 4), st.integers(0, 2**31), st.floats(0.01, 10, allow_nan=False),
    st.lists(st.sampled_from(C.TRANSFORM_KINDS), max_size=4).map(tuple),
    st.none() | st.integers(1, 500), st.booleans(),
)


@given(run_configs)
@settings(max_examples=150, deadline=None)
def test_round_trip(run):
    run = run.validate()
    assert C.loads(C.dumps(run)) == run


def test_file_round_trip(tmp_path):
    run = C.paper_preset()
    C.save(run, tmp_path / "c.cfg")
    assert C.load(tmp_path / "c.cfg") == run
