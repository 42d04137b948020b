"""Run configuration: a flat, typed TOML document plus environment overrides.

Unknown keys are rejected. Any key can be overridden through an environment
variable named ``AFIRE_MIND_<KEY>`` (upper case).
"""

import dataclasses
import os
from dataclasses import dataclass, fields

from .errors import InvalidSpec, IoError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

ENV_PREFIX = "AFIRE_MIND_"


@dataclass
class RunConfig:
    # model dims; 0 means "infer from the data"
    d_in: int = 0
    d: int = 0
    h: int = 0
    o: int = 0
    n_experts: int = 8
    k: int = 2
    n_subjects: int = 0
    router: str = "both"
    use_afire: bool = True
    # training
    epochs: int = 30
    batch_size: int = 8
    peak_lr: float = 3e-3
    weight_decay: float = 1e-4
    div: float = 25.0
    final_div: float = 1e4
    warmup: float = 0.3
    beta: float = 0.01
    lam: float = 1e-4
    clip: float = 1.0
    seed: int = 0
    # data
    data_dir: str = ""
    tr_seconds: float = 1.5
    win: int = 100
    stride: int = 50
    split_ratio: float = 0.9
    purge_overlap: bool = True
    # synthetic data
    synth_mode: str = "shared"
    synth_d: int = 16
    synth_o: int = 32
    synth_experts: int = 4
    synth_k: int = 2
    synth_subjects: int = 4
    synth_episodes: int = 4
    synth_n_tr: int = 500
    synth_sigma: float = -1.0  # negative: derive from synth_ceiling
    synth_ceiling: float = 0.6
    synth_rate_hz: float = 2.0
    synth_dtype: str = "f64"

    def validate(self):
        if self.n_experts < 1 or not 1 <= self.k <= self.n_experts:
            raise InvalidSpec(f"need 1 <= k <= n_experts, got k={self.k}, E={self.n_experts}")
        if not 0.0 < self.split_ratio < 1.0:
            raise InvalidSpec("split_ratio must lie in (0, 1)")
        for name in ("epochs", "batch_size", "win", "stride"):
            if getattr(self, name) < 1:
                raise InvalidSpec(f"{name} must be positive")
        for name in ("peak_lr", "div", "final_div", "tr_seconds", "synth_rate_hz"):
            if getattr(self, name) <= 0:
                raise InvalidSpec(f"{name} must be positive")
        for name in ("d_in", "d", "h", "o", "n_subjects", "weight_decay", "beta", "lam", "clip"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be non-negative")
        if not 0.0 <= self.warmup < 1.0:
            raise InvalidSpec("warmup must lie in [0, 1)")
        if self.router not in ("both", "token", "prior", "token-subj"):
            raise InvalidSpec(f"unknown router {self.router!r}")
        if self.synth_mode not in ("shared", "disjoint", "mixed", "token-modulated"):
            raise InvalidSpec(f"unknown synth_mode {self.synth_mode!r}")
        if self.synth_dtype not in ("f32", "f64"):
            raise InvalidSpec("synth_dtype must be f32 or f64")
        return self

    explicit = frozenset()  # keys set by file, environment or overrides

    def to_dict(self):
        return dataclasses.asdict(self)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, value, from_env=False):
    typ = _TYPES[key]
    typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ)
    if from_env:
        if typ is bool:
            low = value.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise InvalidSpec(f"{key}: cannot parse {value!r} as bool")
            return low in ("1", "true", "yes")
        try:
            return typ(value)
        except ValueError as exc:
            raise InvalidSpec(f"{key}: cannot parse {value!r} as {typ.__name__}") from exc
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
        raise InvalidSpec(f"{key}: expected {typ.__name__}, got {type(value).__name__}")
    return value


def load_config(path=None, env=None, **overrides):
    """Build a validated ``RunConfig`` from defaults, a TOML file, the
    environment and keyword overrides (in that order of precedence)."""
    values = {}
    if path:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise InvalidSpec(f"{path}: {exc}") from exc
        for key, value in doc.items():
            if key not in _TYPES:
                raise InvalidSpec(f"unknown config key {key!r}")
            if isinstance(value, dict):
                raise InvalidSpec(f"config must be flat; {key!r} is a table")
            values[key] = _coerce(key, value)
    env = os.environ if env is None else env
    for name, raw in env.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key not in _TYPES:
                raise InvalidSpec(f"unknown config key {key!r} in environment variable {name}")
            values[key] = _coerce(key, raw, from_env=True)
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _TYPES:
            raise InvalidSpec(f"unknown config key {key!r}")
        values[key] = _coerce(key, value)
    cfg = RunConfig(**values).validate()
    cfg.explicit = frozenset(values)
    return cfg
