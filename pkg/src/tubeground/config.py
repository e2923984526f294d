"""INI experiment configs with sections [plan], [spatial], [temporal], [linker], [sps]."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from typing import Optional

from .core import ContractError
from .linker import LinkerConfig
from .sps import TrainPlan

# section -> {key: (TrainPlan/model attribute, type)}
_LAYOUT = {
    "plan": {
        "epochs": ("epochs", int),
        "total_steps": ("total_steps", "opt_int"),
        "batch_size": ("batch_size", int),
        "seed": ("seed", int),
        "frames": ("frames", int),
        "max_tubelets": ("max_tubelets", "opt_int"),
        "clip_len": ("clip_len", "opt_int"),
        "tau": ("tau", float),
    },
    "spatial": {
        "lr": ("spatial_lr", float),
        "d": ("spatial_d", int),
        "hidden": ("hidden", int),
        "denominator": ("denominator", str),
        "negatives": ("negatives", str),
        "word_value": ("word_value", str),
    },
    "temporal": {
        "lr": ("temporal_lr", float),
        "d": ("temporal_d", int),
        "max_len": ("max_len", int),
        "train": ("train_temporal", bool),
    },
    "sps": {
        "enabled": ("sps_enabled", bool),
        "bounds": ("bounds", "bounds"),
        "use_crg": ("use_crg", bool),
    },
}


def _parse(kind, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind == "opt_int":
            return None if raw.lower() in ("", "none") else int(raw)
        if kind == "bounds":
            return tuple(None if b.strip().lower() in ("inf", "none", "all") else int(b)
                         for b in raw.split(",") if b.strip())
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ContractError(f"bad value {raw!r} for {key}") from None


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join("inf" if b is None else str(b) for b in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "on" if value else "off"
    return str(value)


@dataclass
class ExperimentConfig:
    """Everything a run needs besides data: the plan, model widths and linker thresholds."""

    epochs: int = 10
    total_steps: Optional[int] = None
    batch_size: int = 32
    seed: int = 0
    frames: int = 32
    max_tubelets: Optional[int] = 10
    clip_len: Optional[int] = 16
    tau: float = 0.5
    spatial_lr: float = 1e-4
    spatial_d: int = 256
    hidden: int = 256
    denominator: str = "exclusive"
    negatives: str = "batch"
    word_value: str = "auto"
    temporal_lr: float = 4e-4
    temporal_d: int = 256
    max_len: int = 64
    train_temporal: bool = True
    sps_enabled: bool = True
    bounds: tuple = (4, 7, None)
    use_crg: bool = True
    linker: LinkerConfig = field(default_factory=LinkerConfig)

    def plan(self) -> TrainPlan:
        return TrainPlan(
            epochs=self.epochs, batch_size=self.batch_size, seed=self.seed, use_crg=self.use_crg,
            sps_enabled=self.sps_enabled, bounds=tuple(self.bounds), total_steps=self.total_steps,
            spatial_lr=self.spatial_lr, temporal_lr=self.temporal_lr, frames=self.frames,
            max_tubelets=self.max_tubelets, denominator=self.denominator, negatives=self.negatives,
            max_len=self.max_len, clip_len=self.clip_len, tau=self.tau, train_temporal=self.train_temporal,
        )

    def estimator_params(self) -> dict:
        """Keyword arguments for :class:`CoSPaLGrounder`."""
        plan = self.plan().to_dict()
        plan["bounds"] = tuple(self.bounds)
        plan.update(d=self.spatial_d, hidden=self.hidden, temporal_d=self.temporal_d, word_value=self.word_value)
        return plan

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ContractError(f"unreadable config: {exc}") from None
        kwargs = {}
        for section in parser.sections():
            if section == "linker":
                continue
            if section not in _LAYOUT:
                raise ContractError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in _LAYOUT[section]:
                    raise ContractError(f"unknown option {key!r} in [{section}]")
                attr, kind = _LAYOUT[section][key]
                kwargs[attr] = _parse(kind, raw, f"{section}.{key}")
        if parser.has_section("linker"):
            kwargs["linker"] = LinkerConfig.from_mapping(dict(parser.items("linker")))
        cfg = cls(**kwargs)
        cfg.plan()  # validates the plan fields
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                return cls.from_ini(fh.read())
        except OSError as exc:
            raise ContractError(f"cannot read config {path}: {exc}") from None

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, keys in _LAYOUT.items():
            parser[section] = {key: _format(getattr(self, attr)) for key, (attr, _) in keys.items()}
        parser["linker"] = {f.name: _format(getattr(self.linker, f.name)) for f in fields(self.linker)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()
