"""Flat ``key = value`` pipeline configuration."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .frpointhop import HopConfig
from .registration import RegistrationConfig

DEFAULT_CATEGORIES = ("airplane", "chair", "sofa", "car")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    # feature learning
    k1: int = 64
    k2: int = 32
    normal_k: int = 16
    energy_threshold: float = 0.95
    target_dim: int = 200
    fps_ratio: float = 0.5
    max_train_points: int = 2000
    # retrieval
    vlad_k: int = 10
    codebook_samples: int = 100000
    retrieval_m: int = 10
    # registration
    ransac_iterations: int = 2000
    inlier_threshold: float = 0.05
    mutual: bool = True
    ratio: float = 0.0  # 0 disables the ratio test
    use_symmetry: bool = True
    moment_order: int = 2
    chamfer_threshold: float = 0.2
    # evaluation
    max_rotation_deg: float = 180.0
    max_translation: float = 0.5
    # data
    seed: int = 0
    threads: int = 1
    n_points: int = 2048
    dataset_root: str = ""
    gallery_split: str = "train"
    test_split: str = "test"
    categories: tuple = field(default=DEFAULT_CATEGORIES)

    def __post_init__(self):
        for name in ("k1", "k2", "normal_k", "target_dim", "max_train_points", "vlad_k", "codebook_samples",
                     "retrieval_m", "ransac_iterations", "moment_order", "threads", "n_points"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("energy_threshold", "fps_ratio", "inlier_threshold", "chamfer_threshold",
                     "max_rotation_deg"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.ratio < 0 or self.max_translation < 0 or self.seed < 0:
            raise ConfigError("ratio, max_translation and seed must be non-negative")
        try:
            self.hop_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def hop_config(self) -> HopConfig:
        return HopConfig(k1=self.k1, k2=self.k2, normal_k=self.normal_k, fps_ratio=self.fps_ratio,
                         energy_threshold=self.energy_threshold, target_dim=self.target_dim,
                         max_train_points=self.max_train_points)

    def registration_config(self) -> RegistrationConfig:
        return RegistrationConfig(ransac_iterations=self.ransac_iterations,
                                  inlier_threshold=self.inlier_threshold, seed=self.seed,
                                  mutual=self.mutual, ratio=self.ratio or None,
                                  use_symmetry=self.use_symmetry, moment_order=self.moment_order,
                                  chamfer_threshold=self.chamfer_threshold)

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        return replace(self, **_coerce_all(overrides))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: type(f.default) for f in fields(PipelineConfig)}


def _coerce(key: str, raw):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    if not isinstance(raw, str):
        return tuple(raw) if kind is tuple else kind(raw)
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _coerce_all(pairs: dict) -> dict:
    return {k: _coerce(k, v) for k, v in pairs.items()}


def parse_config(text: str) -> PipelineConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return PipelineConfig(**_coerce_all(pairs))


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = parse_config(p.read_text(encoding="utf-8"))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg
