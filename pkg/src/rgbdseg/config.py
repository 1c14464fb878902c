"""Flat key=value pipeline configuration.

Precedence: CLI flags override the config file, the file overrides the
built-in defaults. Every key is validated against its legal range at load.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .descriptors import DEFAULT_PCA_DIMS, DescriptorConfig
from .inference import CRITERIA


class ConfigError(ValueError):
    pass


def _parse_bool(raw):
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_floats(raw):
    if isinstance(raw, (tuple, list)):
        return tuple(float(v) for v in raw)
    return tuple(float(tok) for tok in str(raw).split(",") if tok.strip())


@dataclass
class PipelineConfig:
    # boundaries / energy
    sigma: float = 0.1
    sigma_set: tuple = (0.05, 0.1, 0.2)
    lambda_min: float = 0.0
    lambda_max: float = 4.0
    capacity_resolution: int = 100_000
    use_depth: bool = True
    # proposals
    grid_n: int = 5
    min_area_frac: float = 0.0005
    max_area_frac: float = 0.9
    dedup_iou: float = 0.95
    mmr_gamma: float = 0.75
    k_test: int = 500
    k_train: int = 300
    # descriptors
    stride: int = 4
    patch: int = 16
    power_p: float = 0.75
    spin_radii: tuple = (0.3, 0.5)
    pca_dim_rgb_sift: int = 512
    pca_dim_depth_sift: int = 256
    pca_dim_lbp: int = 256
    pca_dim_spin: int = 256
    pca_max_fit_samples: int = 512
    # recognition
    regularization: float = 1.0
    loss: str = "ridge"
    # inference
    s_retain: int = 150
    criterion: str = "overlap_confidence"
    # orchestration
    jobs: int = 1

    def __post_init__(self):
        self.sigma_set = _parse_floats(self.sigma_set)
        self.spin_radii = _parse_floats(self.spin_radii)
        self.validate()

    def validate(self):
        checks = [
            ("sigma", self.sigma > 0, "must be > 0"),
            ("sigma_set", len(self.sigma_set) > 0 and all(s > 0 for s in self.sigma_set),
             "needs positive entries"),
            ("lambda_min", self.lambda_min >= 0, "must be >= 0"),
            ("lambda_max", self.lambda_max >= self.lambda_min,
             "must be >= lambda_min"),
            ("capacity_resolution", self.capacity_resolution >= 1, "must be >= 1"),
            ("grid_n", self.grid_n >= 1, "must be >= 1"),
            ("min_area_frac", 0 <= self.min_area_frac < 1, "must be in [0, 1)"),
            ("max_area_frac", self.min_area_frac < self.max_area_frac <= 1,
             "must be in (min_area_frac, 1]"),
            ("dedup_iou", 0 < self.dedup_iou <= 1, "must be in (0, 1]"),
            ("mmr_gamma", self.mmr_gamma >= 0, "must be >= 0"),
            ("k_test", self.k_test >= 1, "must be >= 1"),
            ("k_train", self.k_train >= 1, "must be >= 1"),
            ("stride", self.stride >= 1, "must be >= 1"),
            ("patch", self.patch >= 4 and self.patch % 4 == 0,
             "must be a positive multiple of 4"),
            ("power_p", 0 < self.power_p <= 1, "must be in (0, 1]"),
            ("spin_radii", len(self.spin_radii) == 2
             and all(r > 0 for r in self.spin_radii), "needs two positive radii"),
            ("pca_dim_rgb_sift", self.pca_dim_rgb_sift >= 1, "must be >= 1"),
            ("pca_dim_depth_sift", self.pca_dim_depth_sift >= 1, "must be >= 1"),
            ("pca_dim_lbp", self.pca_dim_lbp >= 1, "must be >= 1"),
            ("pca_dim_spin", self.pca_dim_spin >= 1, "must be >= 1"),
            ("pca_max_fit_samples", self.pca_max_fit_samples >= 2, "must be >= 2"),
            ("regularization", self.regularization >= 0, "must be >= 0"),
            ("loss", self.loss in ("ridge", "svr"), "must be ridge or svr"),
            ("s_retain", self.s_retain >= 1, "must be >= 1"),
            ("criterion", self.criterion in CRITERIA,
             f"must be one of {', '.join(CRITERIA)}"),
            ("jobs", self.jobs >= 1, "must be >= 1"),
        ]
        for key, ok, why in checks:
            if not ok:
                raise ConfigError(f"config key {key}: {why} "
                                  f"(got {getattr(self, key)!r})")

    # -- sources -----------------------------------------------------------

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_sources(cls, path=None, overrides=None) -> "PipelineConfig":
        values = {}
        if path is not None:
            values.update(cls.parse_file(path))
        for key, val in (overrides or {}).items():
            if val is not None:
                values[key] = val
        return cls(**cls._coerce(values))

    @classmethod
    def parse_file(cls, path) -> dict:
        values = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                body = line.split("#", 1)[0].strip()
                if not body:
                    continue
                if "=" not in body:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = (part.strip() for part in body.split("=", 1))
                values[key] = raw
        return values

    @classmethod
    def _coerce(cls, values) -> dict:
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            if isinstance(raw, str):
                try:
                    if kinds[key] == "bool" or kinds[key] is bool:
                        raw = _parse_bool(raw)
                    elif kinds[key] in ("int", int):
                        raw = int(raw)
                    elif kinds[key] in ("float", float):
                        raw = float(raw)
                    elif kinds[key] in ("tuple", tuple):
                        raw = _parse_floats(raw)
                except ValueError as exc:
                    raise ConfigError(f"config key {key}: {exc}") from exc
            out[key] = raw
        return out

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(repr(v) for v in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{f.name} = {val}\n")
        return "".join(lines)

    # -- derived module configs ---------------------------------------------

    def descriptor_config(self, use_depth=None) -> DescriptorConfig:
        dims = dict(DEFAULT_PCA_DIMS)
        dims.update({
            "rgb_sift": self.pca_dim_rgb_sift,
            "rgb_sift_masked": self.pca_dim_rgb_sift,
            "rgb_lbp": self.pca_dim_lbp,
            "depth_sift": self.pca_dim_depth_sift,
            "depth_sift_masked": self.pca_dim_depth_sift,
            "depth_lbp": self.pca_dim_lbp,
            "spin": self.pca_dim_spin,
            "spin_masked": self.pca_dim_spin,
        })
        return DescriptorConfig(
            stride=self.stride, patch=self.patch, spin_radii=self.spin_radii,
            power=self.power_p, pca_dims=dims,
            use_depth=self.use_depth if use_depth is None else use_depth)

    def pool_config(self, ranker=None):
        from .proposals import DEFAULT_RANKER, PoolConfig

        return PoolConfig(
            sigmas=self.sigma_set,
            lambda_range=(self.lambda_min, self.lambda_max),
            resolution=self.capacity_resolution,
            min_area_frac=self.min_area_frac,
            max_area_frac=self.max_area_frac,
            dedup_iou=self.dedup_iou,
            ranker=ranker or DEFAULT_RANKER,
        )
