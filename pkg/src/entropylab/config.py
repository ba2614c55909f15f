"""Experiment configuration: flat ``section.key = value`` text plus environment overrides.

Example::

    # micro run
    env.num_keys = 2
    train.learning_rate = 0.05
    diagnostics.every = 10

Any key can be overridden with ``ELAB_<SECTION>__<KEY>=value`` (case-insensitive).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .env import ToolQASpec, build_spec
from .policy import PolicyArchitecture
from .trainer import TrainConfig

ENV_PREFIX = "ELAB_"
PRESET_DIR = Path(__file__).parent / "configs"


class ConfigError(ValueError):
    """Raised with a field-level message for unparsable or inconsistent configs."""


@dataclass(frozen=True)
class EnvSection:
    num_keys: int = 2
    num_values: int = 2
    think: bool = False
    num_fillers: int = 0
    max_response_len: int = 6


@dataclass(frozen=True)
class PolicySection:
    model_dim: int = 32
    context_window: int = 8
    num_heads: int = 2
    num_blocks: int = 1
    ffn_dim: int = 64
    init_scale: float = 0.02
    output_scale: float = 0.002


@dataclass(frozen=True)
class DiagnosticsSection:
    every: int = 10
    exact_entropy: bool = True       # skipped silently when the enumeration guard would trip
    drift: bool = True
    separation: bool = True
    heldout_groups: int = 4
    heldout_seed: int = 1_000_003


@dataclass(frozen=True)
class MidTrainSection:
    enabled: bool = False
    demos: int = 16
    epochs: int = 200
    learning_rate: float = 0.5


@dataclass(frozen=True)
class RunSection:
    out: str = "runs/default"
    checkpoint_every: int = 50


@dataclass(frozen=True)
class LemmaSection:
    seeds: int = 5
    group_size: int = 4
    pairs: int = 20
    eta: float = 1e-2
    entropy_eta: float = 1e-3
    corollary_trials: int = 100
    corollary_delta: float = 0.8
    snapshots: int = 20


SECTIONS = {
    "env": EnvSection,
    "policy": PolicySection,
    "train": TrainConfig,
    "diagnostics": DiagnosticsSection,
    "midtrain": MidTrainSection,
    "run": RunSection,
    "lemmas": LemmaSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvSection = field(default_factory=EnvSection)
    policy: PolicySection = field(default_factory=PolicySection)
    train: TrainConfig = field(default_factory=TrainConfig)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    midtrain: MidTrainSection = field(default_factory=MidTrainSection)
    run: RunSection = field(default_factory=RunSection)
    lemmas: LemmaSection = field(default_factory=LemmaSection)

    def __post_init__(self):
        e, p = self.env, self.policy
        if e.num_keys < 1 or e.num_values < 1:
            raise ConfigError("env.num_keys and env.num_values must be >= 1")
        if e.num_fillers and not e.think:
            raise ConfigError("env.num_fillers requires env.think = true")
        if e.max_response_len < 1:
            raise ConfigError("env.max_response_len must be >= 1")
        if p.context_window < 2 + e.max_response_len:
            raise ConfigError(f"policy.context_window = {p.context_window} cannot hold a prompt of 2 "
                              f"plus env.max_response_len = {e.max_response_len}")
        if self.diagnostics.every < 1:
            raise ConfigError("diagnostics.every must be >= 1")
        if self.run.checkpoint_every < 1:
            raise ConfigError("run.checkpoint_every must be >= 1")
        if self.diagnostics.heldout_groups < 0:
            raise ConfigError("diagnostics.heldout_groups must be >= 0")
        if self.lemmas.seeds < 1:
            raise ConfigError("lemmas.seeds must be >= 1")

    def spec(self) -> ToolQASpec:
        e = self.env
        return build_spec(e.num_keys, e.num_values, e.think, e.num_fillers, e.max_response_len)

    def architecture(self) -> PolicyArchitecture:
        p = self.policy
        return PolicyArchitecture(self.spec().vocab_size, p.model_dim, p.context_window, p.num_heads,
                                  p.num_blocks, p.ffn_dim)

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, name)).items():
                lines.append(f"{name}.{k} = {_format(v)}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides: dict[str, str]) -> ExperimentConfig:
        return _build(_flatten(self) | {k.lower(): v for k, v in overrides.items()})


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw, typ):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    return raw


def _flatten(cfg: ExperimentConfig) -> dict:
    return {f"{name}.{k}": v for name in SECTIONS for k, v in dataclasses.asdict(getattr(cfg, name)).items()}


def _build(flat: dict) -> ExperimentConfig:
    sections: dict[str, dict] = {name: {} for name in SECTIONS}
    for key, raw in flat.items():
        name, _, attr = key.partition(".")
        if name not in SECTIONS or not attr:
            raise ConfigError(f"{key}: unknown section (expected one of {', '.join(SECTIONS)})")
        fields = {f.name: f for f in dataclasses.fields(SECTIONS[name])}
        if attr not in fields:
            raise ConfigError(f"{key}: unknown field for section {name!r}")
        sections[name][attr] = _coerce(key, raw, fields[attr].type)
    built = {}
    for name, cls in SECTIONS.items():
        try:
            built[name] = cls(**sections[name])
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from None
    return ExperimentConfig(**built)


def parse_config(text: str) -> ExperimentConfig:
    flat = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        key = key.strip().lower()
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        flat[key] = value.strip()
    return _build(flat)


def env_overrides(environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.upper().startswith(ENV_PREFIX) and "__" in name:
            section, _, key = name[len(ENV_PREFIX):].partition("__")
            out[f"{section.lower()}.{key.lower()}"] = value
    return out


def resolve_preset(name_or_path) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    preset = PRESET_DIR / f"{name_or_path}.conf"
    if preset.exists():
        return preset
    raise ConfigError(f"config {name_or_path!r} not found (presets: {', '.join(list_presets())})")


def list_presets() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.conf"))


def load_config(name_or_path, environ=None, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    cfg = parse_config(resolve_preset(name_or_path).read_text())
    overrides = env_overrides(environ)
    if seed is not None:
        overrides["train.seed"] = str(seed)
    if out is not None:
        overrides["run.out"] = out
    return cfg.with_overrides(overrides) if overrides else cfg
