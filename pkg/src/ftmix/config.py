"""Attack and run configuration, named pipelines and the ``.cfg`` file format.

Config files are INI-style with three sections::

    [attack]      scalar attack hyperparameters (AttackConfig)
    [transforms]  transform parameters (TransformParams)
    [run]         dataset / registry / model selection (RunConfig)

Any key may be overridden with ``section.key=value`` strings, which is how
the CLI and the ablation sweeps script changes.
"""

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from typing import Optional

from ._validation import check_scalar

TRANSFORM_KINDS = ("DI", "RDI", "TI", "SI", "Admix", "VT", "Identity")

# MI (momentum) and TI (gradient smoothing) are part of every named pipeline.
PIPELINES = {
    "MI": {"transforms": ("TI",), "feature_mixup": False},
    "DI": {"transforms": ("DI", "TI"), "feature_mixup": False},
    "RDI": {"transforms": ("RDI", "TI"), "feature_mixup": False},
    "RDI-SI": {"transforms": ("SI", "RDI", "TI"), "feature_mixup": False},
    "RDI-VT": {"transforms": ("RDI", "VT", "TI"), "feature_mixup": False},
    "RDI-Admix": {"transforms": ("Admix", "RDI", "TI"), "feature_mixup": False},
    "RDI-CFM": {"transforms": ("RDI", "TI"), "feature_mixup": True, "beta": 0.0},
    "RDI-FTM": {"transforms": ("RDI", "TI"), "feature_mixup": True},
    "RDI-FTM-E": {"transforms": ("RDI", "TI"), "feature_mixup": True, "ensemble_k": 2},
}
CUSTOM = "custom"


class ConfigError(ValueError):
    """Raised for invalid configuration; the message starts with the field path."""


@dataclass(frozen=True)
class TransformParams:
    di_prob: float = 0.7
    max_pad_ratio: float = 1.1
    ti_kernel_size: int = 5
    ti_sigma: float = 3.0
    si_copies: int = 5
    admix_weight: float = 0.2
    admix_count: int = 3
    admix_scales: int = 1
    vt_samples: int = 5
    vt_bound: float = 1.5

    def validate(self):
        _wrap("transforms.di_prob", check_scalar, self.di_prob, "di_prob", lo=0, hi=1)
        _wrap("transforms.max_pad_ratio", check_scalar, self.max_pad_ratio, "max_pad_ratio", lo=1)
        _wrap("transforms.ti_kernel_size", check_scalar, self.ti_kernel_size, "ti_kernel_size", lo=1, integer=True)
        if self.ti_kernel_size % 2 == 0:
            raise ConfigError("transforms.ti_kernel_size: must be odd")
        _wrap("transforms.ti_sigma", check_scalar, self.ti_sigma, "ti_sigma", lo=0, lo_open=True)
        _wrap("transforms.si_copies", check_scalar, self.si_copies, "si_copies", lo=1, integer=True)
        _wrap("transforms.admix_weight", check_scalar, self.admix_weight, "admix_weight", lo=0, hi=1)
        _wrap("transforms.admix_count", check_scalar, self.admix_count, "admix_count", lo=1, integer=True)
        _wrap("transforms.admix_scales", check_scalar, self.admix_scales, "admix_scales", lo=1, integer=True)
        _wrap("transforms.vt_samples", check_scalar, self.vt_samples, "vt_samples", lo=1, integer=True)
        _wrap("transforms.vt_bound", check_scalar, self.vt_bound, "vt_bound", lo=0)
        return self


@dataclass(frozen=True)
class AttackConfig:
    """Scalar hyperparameters of one attack run.

    ``n_iter`` is the iteration count, ``p`` the per-layer selection
    probability and ``ensemble_k`` the number of perturbed surrogate copies.
    ``feature_mixup`` switches the feature-space machinery on; with
    ``beta=0`` it degenerates to clean feature mixup.
    """

    epsilon: float = 16 / 255
    eta: float = 2 / 255
    mu: float = 1.0
    n_iter: int = 300
    beta: float = 0.01
    p: float = 0.1
    alpha_max: float = 0.75
    ensemble_k: int = 1
    eps_bar: float = 1e-12
    transforms: tuple = ("RDI", "TI")
    feature_mixup: bool = True
    seed: int = 0
    transform_params: TransformParams = field(default_factory=TransformParams)

    def validate(self):
        _wrap("attack.epsilon", check_scalar, self.epsilon, "epsilon", lo=0, hi=1, lo_open=True)
        _wrap("attack.eta", check_scalar, self.eta, "eta", lo=0, hi=self.epsilon, lo_open=True)
        _wrap("attack.mu", check_scalar, self.mu, "mu", lo=0)
        _wrap("attack.n_iter", check_scalar, self.n_iter, "n_iter", lo=1, integer=True)
        _wrap("attack.beta", check_scalar, self.beta, "beta", lo=0)
        _wrap("attack.p", check_scalar, self.p, "p", lo=0, hi=1)
        _wrap("attack.alpha_max", check_scalar, self.alpha_max, "alpha_max", lo=0, hi=1)
        _wrap("attack.ensemble_k", check_scalar, self.ensemble_k, "ensemble_k", lo=1, integer=True)
        _wrap("attack.eps_bar", check_scalar, self.eps_bar, "eps_bar", lo=0, lo_open=True)
        _wrap("attack.seed", check_scalar, self.seed, "seed", lo=0, integer=True)
        for t in self.transforms:
            if t not in TRANSFORM_KINDS:
                raise ConfigError(f"attack.transforms: unknown transform {t!r}; choose from {TRANSFORM_KINDS}")
        self.transform_params.validate()
        return self


@dataclass(frozen=True)
class RunConfig:
    attack: str = "RDI-FTM"
    attack_config: AttackConfig = field(default_factory=AttackConfig)
    dataset: str = ""
    registry: str = ""
    surrogate: str = ""
    targets: tuple = ()
    output_dir: str = "runs"
    mode: str = "desk"
    batch_size: int = 64
    limit: Optional[int] = None

    def validate(self):
        if self.attack not in PIPELINES and self.attack != CUSTOM:
            raise ConfigError(f"run.attack: unknown attack {self.attack!r}; choose from {sorted(PIPELINES)} or 'custom'")
        if self.mode not in ("desk", "full"):
            raise ConfigError(f"run.mode: must be 'desk' or 'full', got {self.mode!r}")
        _wrap("run.batch_size", check_scalar, self.batch_size, "batch_size", lo=1, integer=True)
        if self.limit is not None:
            _wrap("run.limit", check_scalar, self.limit, "limit", lo=1, integer=True)
        if self.attack == "RDI-FTM-E" and self.attack_config.ensemble_k < 2:
            raise ConfigError("attack.ensemble_k: RDI-FTM-E requires ensemble_k >= 2")
        self.attack_config.validate()
        return self


def _wrap(path, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def pipeline_config(name, **overrides):
    """Build the AttackConfig of a named pipeline, default hyperparameters elsewhere."""
    if name not in PIPELINES:
        raise ConfigError(f"run.attack: unknown attack {name!r}")
    return replace(AttackConfig(), **{**PIPELINES[name], **overrides}).validate()


def preset(name):
    """A shipped preset (``paper`` or ``desk``) as a RunConfig."""
    path = resources.files("ftmix").joinpath(f"presets/{name}.cfg")
    if not path.is_file():
        raise ConfigError(f"preset: unknown preset {name!r}")
    return loads(path.read_text())


def paper_preset():
    return preset("paper")


# --- text format -------------------------------------------------------------

_SECTIONS = {"attack": AttackConfig, "transforms": TransformParams, "run": RunConfig}
_NESTED = {"attack_config", "transform_params"}


def _format(value):
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def _parse(path, ftype, raw):
    raw = raw.strip()
    try:
        if ftype is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if ftype is int:
            return int(raw)
        if ftype is float:
            return _parse_float(raw)
        if ftype is tuple:
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        if ftype == Optional[int]:
            return int(raw) if raw else None
        return raw
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _parse_float(raw):
    if "/" in raw:
        num, den = raw.split("/")
        return float(num) / float(den)
    return float(raw)


def _field_types(cls):
    return {f.name: f.type for f in fields(cls) if f.name not in _NESTED}


def dumps(run):
    """Serialize a RunConfig; ``loads(dumps(c)) == c`` holds exactly."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["attack"] = {k: _format(getattr(run.attack_config, k)) for k in _field_types(AttackConfig)}
    parser["transforms"] = {k: _format(v) for k, v in dataclasses.asdict(run.attack_config.transform_params).items()}
    parser["run"] = {k: _format(getattr(run, k)) for k in _field_types(RunConfig)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def loads(text, overrides=()):
    """Parse config text, apply ``section.key=value`` overrides, validate.

    Keys missing from the file fall back to the named pipeline's defaults,
    so a file naming ``attack = RDI-FTM-E`` alone gets ``ensemble_k = 2``.
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"<file>: {exc}") from None
    values = {s: dict(parser[s]) if parser.has_section(s) else {} for s in _SECTIONS}
    for extra in parser.sections():
        if extra not in _SECTIONS:
            raise ConfigError(f"{extra}: unknown section")
    for item in overrides:
        key, sep, val = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or section not in _SECTIONS:
            raise ConfigError(f"{key}: override must look like section.key=value")
        values[section][name] = val
    parsed = {}
    for section, cls in _SECTIONS.items():
        types = _field_types(cls)
        out = {}
        for k, raw in values[section].items():
            if k not in types:
                raise ConfigError(f"{section}.{k}: unknown key")
            out[k] = _parse(f"{section}.{k}", types[k], raw)
        parsed[section] = out

    attack = parsed["run"].get("attack", RunConfig.attack)
    base = dict(PIPELINES.get(attack, {}))
    tparams = replace(TransformParams(), **parsed["transforms"])
    acfg = replace(AttackConfig(), **{**base, **parsed["attack"]}, transform_params=tparams)
    run = replace(RunConfig(), **parsed["run"], attack_config=acfg)
    return run.validate()


def load(path, overrides=()):
    with open(path) as fh:
        return loads(fh.read(), overrides)


def save(run, path):
    with open(path, "w") as fh:
        fh.write(dumps(run))
