"""Run configuration read from an INI file.

Every section and key is optional; unknown sections or keys are errors so a
typo cannot silently fall back to a default.  See configs/ for examples.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError

METHODS = ("natgrad", "bbb", "swag", "hmc")
LIKELIHOODS = ("standard", "ibp", "pgd")
EPS_KINDS = ("dirac", "discrete", "rayleigh", "exponential")


@dataclass(frozen=True)
class DataSection:
    kind: str = "idx"                  # idx | toy
    train_images: str = "data/mnist/train-images-idx3-ubyte.gz"
    train_labels: str = "data/mnist/train-labels-idx1-ubyte.gz"
    test_images: str = "data/mnist/t10k-images-idx3-ubyte.gz"
    test_labels: str = "data/mnist/t10k-labels-idx1-ubyte.gz"
    ood_images: str = "data/fashion-mnist/images-idx3-ubyte.gz"
    ood_labels: str = "data/fashion-mnist/labels-idx1-ubyte.gz"
    train_size: int = 10000            # 0 = use everything
    test_size: int = 1000
    toy_kind: str = "two_gaussians"
    toy_size: int = 200
    clip_lower: float = 0.0
    clip_upper: float = 1.0


@dataclass(frozen=True)
class ModelSection:
    hidden: tuple = (128,)
    init_scale: float = 1.0


@dataclass(frozen=True)
class TrainSection:
    method: str = "natgrad"
    likelihood: str = "standard"
    epochs: int = 15
    batch_size: int = 128
    lr: float = 0.03
    lr_decay: float = 0.8
    reduction: str = "sum"             # natgrad only: sum | mean


@dataclass(frozen=True)
class EpsSection:
    kind: str = "discrete"
    lam: float = 0.25
    eta: float = 0.1
    mc_samples: int = 10


@dataclass(frozen=True)
class RampSection:
    warmup_epochs: float = 3.0
    overshoot: float = 0.10


@dataclass(frozen=True)
class AttackSection:
    eps: float = 0.1
    steps: int = 10
    step_size: float = 0.0             # 0 = 2.5 * eps / steps
    restarts: int = 1
    eval_steps: int = 20


@dataclass(frozen=True)
class PriorSection:
    scaling: float = 10.0


@dataclass(frozen=True)
class HMCSection:
    step_size: float = 0.01
    leapfrog_steps: int = 20
    burn_in: int = 3
    num_samples: int = 25
    thin: int = 25
    warm_start_epochs: int = 10        # SGD epochs before sampling (robust likelihoods)


@dataclass(frozen=True)
class SWAGSection:
    warmup_epochs: int = 5
    collect_every: int = 50


@dataclass(frozen=True)
class CertifySection:
    eps: tuple = (0.05, 0.1)
    samples: int = 100
    radius_points: int = 100
    radius_tol: float = 1e-3
    sample_seed: int = 7


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    p_eps: EpsSection = field(default_factory=EpsSection)
    ramp: RampSection = field(default_factory=RampSection)
    attack: AttackSection = field(default_factory=AttackSection)
    prior: PriorSection = field(default_factory=PriorSection)
    hmc: HMCSection = field(default_factory=HMCSection)
    swag: SWAGSection = field(default_factory=SWAGSection)
    certify: CertifySection = field(default_factory=CertifySection)
    seed: int = 0

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


# key names as written in the file, where they differ from the attribute
_ALIASES = {("p_eps", "lambda"): "lam"}
_SECTIONS = [f.name for f in fields(RunConfig) if f.name != "seed"]


def _convert(section, key, raw, default):
    name = f"{section}.{key}"
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}", field=name) from None


def _validate(cfg):
    checks = [
        ("train.method", cfg.train.method in METHODS, f"one of {', '.join(METHODS)}"),
        ("train.likelihood", cfg.train.likelihood in LIKELIHOODS,
         f"one of {', '.join(LIKELIHOODS)}"),
        ("train.reduction", cfg.train.reduction in ("sum", "mean"), "sum or mean"),
        ("train.epochs", cfg.train.epochs >= 1, "at least 1"),
        ("train.batch_size", cfg.train.batch_size >= 1, "at least 1"),
        ("train.lr", cfg.train.lr > 0, "positive"),
        ("p_eps.kind", cfg.p_eps.kind in EPS_KINDS, f"one of {', '.join(EPS_KINDS)}"),
        ("p_eps.lambda", 0.0 <= cfg.p_eps.lam <= 1.0, "in [0, 1]"),
        ("p_eps.eta", cfg.p_eps.eta >= 0, "non-negative"),
        ("data.kind", cfg.data.kind in ("idx", "toy"), "idx or toy"),
        ("model.hidden", all(h >= 1 for h in cfg.model.hidden), "positive widths"),
        ("prior.scaling", cfg.prior.scaling > 0, "positive"),
        ("certify.eps", all(e >= 0 for e in cfg.certify.eps), "non-negative"),
        ("certify.samples", cfg.certify.samples >= 1, "at least 1"),
    ]
    for name, ok, expected in checks:
        if not ok:
            raise ConfigError(f"{name}: expected {expected}", field=name)
    return cfg


def parse_config(text, seed=None):
    """RunConfig from INI text; ``seed`` overrides [run] seed if given."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    base = RunConfig()
    parts = {}
    run_seed = base.seed
    for section in parser.sections():
        if section == "run":
            for key, raw in parser.items(section):
                if key != "seed":
                    raise ConfigError(f"unknown key run.{key}", field=f"run.{key}")
                run_seed = _convert("run", key, raw, 0)
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]", field=section)
        current = getattr(base, section)
        # only the file spelling of an aliased key is accepted
        hidden = {a for (s, _), a in _ALIASES.items() if s == section}
        known = {f.name for f in fields(current)} - hidden
        values = {}
        for key, raw in parser.items(section):
            attr = _ALIASES.get((section, key), key)
            if attr not in known and (section, key) not in _ALIASES:
                raise ConfigError(f"unknown key {section}.{key}", field=f"{section}.{key}")
            values[attr] = _convert(section, key, raw, getattr(current, attr))
        parts[section] = replace(current, **values)
    cfg = replace(base, seed=run_seed if seed is None else int(seed), **parts)
    return _validate(cfg)


def load_config(path, seed=None):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, seed)


def config_to_ini(cfg):
    """INI text that parses back to ``cfg``."""
    lines = ["[run]", f"seed = {cfg.seed}", ""]
    inverse = {(s, a): k for (s, k), a in _ALIASES.items()}
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        part = getattr(cfg, section)
        for f in fields(part):
            v = getattr(part, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{inverse.get((section, f.name), f.name)} = {v}")
        lines.append("")
    return "\n".join(lines)
