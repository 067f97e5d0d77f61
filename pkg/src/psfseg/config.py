"""Flat ``key = value`` run configuration.

Every key is declared in ``SCHEMA`` with a parser and default; unknown keys
and unparsable values are configuration errors. Lists are comma separated.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

from .errors import ConfigError
from .pdnet import PdNetConfig, TrainSettings
from .pointconv import PointCNNConfig, PointCNNTrainSettings
from .sparse import SparseNetConfig, SparseTrainSettings

MODELS = ("pdnet", "sparse", "pointcnn")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {options}")
        return text

    return parse


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return "none" if v is None else str(v)


_desk = PdNetConfig.desk()
_sp = SparseNetConfig()
_pc = PointCNNConfig()

SCHEMA: dict[str, tuple] = {
    "seed": (int, 0),
    "train.epochs": (int, 6),
    "train.batch_size": (int, 8),
    "train.lr": (float, 3e-3),
    "train.max_steps": (_opt_int, None),
    "train.val_fraction": (float, 0.0),
    "eval.empty_union": (_choice("one", "skip"), "one"),
    "pdnet.widths": (_ints, _desk.widths),
    "pdnet.bottleneck": (int, _desk.bottleneck),
    "pdnet.head": (_ints, _desk.head),
    "pdnet.lift": (int, _desk.lift),
    "pdnet.cloud_size": (int, _desk.cloud_size),
    "pdnet.ensemble": (int, _desk.ensemble),
    "pdnet.subset_size": (int, _desk.subset_size),
    "sparse.resolution": (int, _sp.resolution),
    "sparse.features": (_choice("occupancy", "count", "coords"), _sp.features),
    "sparse.channels": (int, _sp.channels),
    "sparse.blocks": (int, _sp.blocks),
    "sparse.noise": (float, 0.0),
    "pointcnn.k": (int, _pc.k),
    "pointcnn.hidden": (int, _pc.hidden),
    "pointcnn.level_sizes": (_ints, _pc.level_sizes),
    "pointcnn.enc_channels": (_ints, _pc.enc_channels),
    "pointcnn.dec_channels": (_ints, _pc.dec_channels),
}


class RunConfig(dict):
    """Mapping from every schema key to its parsed value."""

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: d for k, (_, d) in SCHEMA.items()})

    def updated(self, values: dict) -> "RunConfig":
        out = RunConfig(self)
        for key, raw in values.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            parse = SCHEMA[key][0]
            try:
                out[key] = parse(raw) if isinstance(raw, str) else raw
            except ValueError as e:
                raise ConfigError(f"bad value {raw!r} for {key}: {e}") from None
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(self[k])}\n" for k in sorted(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    # -- per-model views ---------------------------------------------------

    def pdnet(self) -> PdNetConfig:
        cfg = PdNetConfig(
            widths=self["pdnet.widths"],
            bottleneck=self["pdnet.bottleneck"],
            head=self["pdnet.head"],
            lift=self["pdnet.lift"],
            cloud_size=self["pdnet.cloud_size"],
            ensemble=self["pdnet.ensemble"],
            subset_size=self["pdnet.subset_size"],
        )
        cfg.validate()
        return cfg

    def sparse(self) -> SparseNetConfig:
        cfg = SparseNetConfig(
            resolution=self["sparse.resolution"],
            features=self["sparse.features"],
            channels=self["sparse.channels"],
            blocks=self["sparse.blocks"],
        )
        cfg.validate()
        return cfg

    def pointcnn(self) -> PointCNNConfig:
        cfg = PointCNNConfig(
            k=self["pointcnn.k"],
            hidden=self["pointcnn.hidden"],
            level_sizes=self["pointcnn.level_sizes"],
            enc_channels=self["pointcnn.enc_channels"],
            dec_channels=self["pointcnn.dec_channels"],
        )
        cfg.validate()
        return cfg

    def model_config(self, model: str):
        if model not in MODELS:
            raise ConfigError(f"unknown model {model!r}; choose from {MODELS}")
        return getattr(self, model)()

    def train_settings(self, model: str):
        common = dict(
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            lr=self["train.lr"],
            max_steps=self["train.max_steps"],
        )
        if model == "pdnet":
            return TrainSettings(**common)
        if model == "sparse":
            return SparseTrainSettings(noise=self["sparse.noise"], **common)
        return PointCNNTrainSettings(**common)

    def validate(self, model: str) -> None:
        """Raise ConfigError for any conflict, before compute starts."""
        self.model_config(model)
        if self["train.epochs"] < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self["train.batch_size"] < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not self["train.lr"] > 0:
            raise ConfigError("train.lr must be positive")
        if not 0.0 <= self["train.val_fraction"] < 1.0:
            raise ConfigError("train.val_fraction must lie in [0, 1)")
        if self["pdnet.ensemble"] < 1:
            raise ConfigError("pdnet.ensemble must be >= 1")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; ``#`` starts a comment."""
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{no}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{no}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig.defaults()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        cfg = cfg.updated(parse_config_text(p.read_text(), str(path)))
    return cfg.updated(overrides or {})
