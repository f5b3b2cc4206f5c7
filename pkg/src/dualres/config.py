"""Declarative run configuration: INI-style ``[section]`` blocks of ``key = value``.

Unknown sections or keys are rejected so a typo cannot silently fall back
to a default.  Every value has a default; an empty file is a valid config.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .checkpoint import config_digest
from .corpus import TaskSpec
from .duplex import DuplexPolicy
from .mllm import BackboneConfig, ModelConfig  # noqa: F401  (re-exported)
from .training import STAGE_LR, STAGE_STEPS, TASK_TAGS, MergeSpec


class ConfigError(ValueError):
    pass


@dataclass
class StageConfig:
    steps: int
    lr_start: float
    lr_end: float
    batch_size: int = 16
    weight_decay: float = 0.01


def _stage(name: str, **kw) -> StageConfig:
    return StageConfig(STAGE_STEPS[name], *STAGE_LR[name], **kw)


@dataclass
class DPOConfig:
    beta: float = 0.1
    noise: float = 0.2
    # per-tag mixing weights for the unified objective
    robustness: float = 1.0
    instruction: float = 1.0
    understanding: float = 1.0
    empathy: float = 1.0

    def tag_weights(self) -> dict:
        return {t: getattr(self, t) for t in TASK_TAGS}


@dataclass
class CodecConfig:
    mapping_seed: int = 0


@dataclass
class DuplexConfig:
    n_dialogues: int = 100
    min_turns: int = 1
    max_turns: int = 3
    min_len: int = 1
    max_len: int = 3
    dialogue_seed: int = 1
    script_seed: int = 2
    min_gap: int = 1
    max_gap: int = 2
    min_user_gap: int = 2
    max_user_gap: int = 2
    p_barge: float = 0.5
    p_backchannel: float = 0.1
    start_window: int = 10
    yield_window: int = 10
    steps: int = 1500
    lr_start: float = 3e-3
    lr_end: float = 3e-4
    batch_size: int = 16

    def policy(self) -> DuplexPolicy:
        return DuplexPolicy(self.min_gap, self.max_gap, self.min_user_gap, self.max_user_gap,
                            self.p_barge, self.p_backchannel)


@dataclass
class EvalConfig:
    split: str = "heldout"
    max_new: int = 0  # 0: gold length + 4


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: TaskSpec = field(default_factory=TaskSpec)
    codec: CodecConfig = field(default_factory=CodecConfig)
    prealign: StageConfig = field(default_factory=lambda: _stage("prealign"))
    cocktail1: StageConfig = field(default_factory=lambda: _stage("cocktail1"))
    cocktail2: StageConfig = field(default_factory=lambda: _stage("cocktail2"))
    dpo_stage: StageConfig = field(default_factory=lambda: _stage("dpo", weight_decay=0.0))
    merge: MergeSpec = field(default_factory=MergeSpec)
    dpo: DPOConfig = field(default_factory=DPOConfig)
    duplex: DuplexConfig = field(default_factory=DuplexConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return config_digest(self.to_dict())

    @property
    def stages(self) -> dict:
        return {"prealign": self.prealign, "cocktail1": self.cocktail1,
                "cocktail2": self.cocktail2, "dpo": self.dpo_stage}


# section name in the file -> (attribute, nested attribute or None)
SECTIONS = {
    "model": ("model", None),
    "backbone": ("model", "backbone"),
    "corpus": ("corpus", None),
    "codec": ("codec", None),
    "prealign": ("prealign", None),
    "cocktail1": ("cocktail1", None),
    "cocktail2": ("cocktail2", None),
    "dpo": ("dpo_stage", "+dpo"),
    "merge": ("merge", None),
    "duplex": ("duplex", None),
    "eval": ("eval", None),
}


def _coerce(raw: str, current, where: str):
    kind = type(current)
    try:
        if kind is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if current is None:  # optional int (e.g. the corpus marker)
            return None if raw.strip().lower() in ("", "none") else int(raw)
        if kind is tuple:
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None


def _replace(obj, values: dict, section: str):
    fields = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in values.items():
        if key not in fields or dataclasses.is_dataclass(fields[key]):
            raise ConfigError(f"[{section}] unknown key {key!r}")
        changes[key] = _coerce(raw, fields[key], f"[{section}] {key}")
    try:
        return dataclasses.replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def apply_overrides(cfg: PipelineConfig, overrides: dict[str, dict[str, str]]) -> PipelineConfig:
    """Apply ``{section: {key: raw string}}`` on top of ``cfg``."""
    for section, values in overrides.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        attr, nested = SECTIONS[section]
        if nested == "+dpo":
            # [dpo] mixes stage-plan keys and objective keys
            plan_keys = {f.name for f in dataclasses.fields(StageConfig)}
            cfg.dpo_stage = _replace(cfg.dpo_stage, {k: v for k, v in values.items() if k in plan_keys}, section)
            cfg.dpo = _replace(cfg.dpo, {k: v for k, v in values.items() if k not in plan_keys}, section)
        elif nested:
            parent = getattr(cfg, attr)
            setattr(parent, nested, _replace(getattr(parent, nested), values, section))
        else:
            setattr(cfg, attr, _replace(getattr(cfg, attr), values, section))
    _validate(cfg)
    return cfg


def _validate(cfg: PipelineConfig) -> None:
    for name, st in cfg.stages.items():
        if st.steps < 0 or st.batch_size < 1:
            raise ConfigError(f"[{name}] steps must be >= 0 and batch_size >= 1")
        if not st.lr_start >= st.lr_end > 0:
            raise ConfigError(f"[{name}] need lr_start >= lr_end > 0")
    if cfg.dpo.beta <= 0:
        raise ConfigError("[dpo] beta must be positive")
    if cfg.eval.split not in ("train", "heldout"):
        raise ConfigError("[eval] split must be 'train' or 'heldout'")
    try:
        cfg.duplex.policy()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(text: str, source: str = "<string>") -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from None
    overrides = {s: dict(parser.items(s)) for s in parser.sections()}
    return apply_overrides(PipelineConfig(), overrides)


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{p}: config file not found")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def parse_assignments(items) -> dict[str, dict[str, str]]:
    """``section.key=value`` strings (command-line overrides) -> nested dict."""
    out: dict[str, dict[str, str]] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not section or not name:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        out.setdefault(section, {})[name] = value
    return out


def dump_config(cfg: PipelineConfig) -> str:
    """Render ``cfg`` back to the file format; ``parse_config`` of the result is equal."""
    lines = []
    d = cfg.to_dict()
    for section, (attr, nested) in SECTIONS.items():
        if nested == "+dpo":
            values = {**d["dpo_stage"], **d["dpo"]}
        elif nested:
            values = d[attr][nested]
        else:
            values = {k: v for k, v in d[attr].items() if not isinstance(v, dict)}
        lines.append(f"[{section}]")
        for k, v in values.items():
            if isinstance(v, (list, tuple)):
                v = ", ".join(map(str, v))
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


__all__ = ["BackboneConfig", "ConfigError", "DPOConfig", "DuplexConfig", "EvalConfig", "PipelineConfig",
           "StageConfig", "apply_overrides", "dump_config", "load_config", "parse_assignments", "parse_config"]
