"""Flat ``key=value`` run configuration with command-line overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from typing import Any, Mapping

import torch

from .errors import ConfigurationError
from .learn import TrainConfig, build_network
from .core import NetworkConfig

CACHE_ENV = "SDPC_CACHE_DIR"


def _floats(s: str) -> list[float]:
    return [float(v) for v in str(s).split(",") if v.strip()]


def _ints(s: str) -> list[int]:
    return [int(v) for v in str(s).split(",") if v.strip()]


@dataclass
class RunConfig:
    """Every field defaults to the STL-10 settings (two layers)."""

    # data
    dataset: str = "stl10"  # stl10 | images
    data_dir: str = ""
    n_train: int = 5000
    n_test: int = 1200
    subset: int = 0  # cap on training images (0 = all)
    eval_subset: int = 0  # cap on test images used by analysis commands (0 = all)
    resize: str = ""  # "HxW", e.g. 120x170 for face images
    grayscale: bool = False
    # preprocessing
    lcn_kernel: int = 9
    lcn_sigma: float = 2.0
    lcn_eps: float = 1e-2
    whiten: bool = True
    whiten_patch: int = 9
    whiten_max_patches: int = 100_000
    # network
    shapes: str = "64x3x8x8,128x64x8x8"
    strides: str = "2,1"
    lams: str = "0.4,1.2"
    k_fb: float = 1.0  # feedback strength used for training
    t_stab: float = 5e-3
    max_iters: int = 500
    dtype: str = "float32"
    # training
    epochs: int = 250
    eta_l: str = "1e-4,5e-3"
    momentum: float = 0.9
    batch_size: int = 10
    seed: int = 0
    # experiments
    k_fb_grid: str = "0,1,2,3,4"
    sigma_grid: str = "0,1,2,3,4,5"
    r2_threshold: float = 0.5
    map_radius: int = 4
    top_k: int = 10
    theta_grid: int = 0  # 0 = orientations of the retained features
    theta_tol: float = 7.5
    probe_images: int = 100
    # locations
    out_dir: str = "runs/default"
    cache_dir: str = ""
    checkpoint: str = ""

    def __post_init__(self):
        self.validate()

    # ---- parsing -----------------------------------------------------------------

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def coerce(cls, key: str, value: Any):
        types = {f.name: f.type for f in fields(cls)}
        if key not in types:
            raise ConfigurationError(f"unknown config key {key!r}")
        t = types[key]
        if isinstance(value, str):
            value = value.strip()
        try:
            if t == "bool":
                if isinstance(value, bool):
                    return value
                v = str(value).lower()
                if v in ("1", "true", "yes", "on"):
                    return True
                if v in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            if t == "int":
                return int(value)
            if t == "float":
                return float(value)
            return str(value)
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {key}: {value!r}") from exc

    def replace(self, **changes) -> "RunConfig":
        coerced = {k: self.coerce(k, v) for k, v in changes.items()}
        return dataclasses.replace(self, **coerced)

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        changes = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"config line {n}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            changes[k.strip().replace("-", "_")] = v
        return (base or cls()).replace(**changes)

    @classmethod
    def load(cls, path, overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        cfg = cls.from_text(text)
        return cfg.replace(**(overrides or {}))

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name}={repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(out) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    # ---- validation and derived objects ---------------------------------------------

    def validate(self) -> None:
        if self.dataset not in ("stl10", "images"):
            raise ConfigurationError(f"dataset must be stl10 or images, got {self.dataset!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")
        n = len(self.layer_shapes())
        if not n == len(self.stride_list()) == len(self.lam_list()):
            raise ConfigurationError("shapes, strides and lams must list the same number of layers")
        if len(self.eta_list()) < n:
            raise ConfigurationError(f"eta_l needs {n} values")
        if self.lcn_kernel % 2 != 1 or (self.whiten and self.whiten_patch % 2 != 1):
            raise ConfigurationError("lcn_kernel and whiten_patch must be odd")
        if self.map_radius < 1 or self.top_k < 1:
            raise ConfigurationError("map_radius and top_k must be >= 1")
        if self.resize:
            self.resize_hw()

    def layer_shapes(self) -> list[tuple[int, ...]]:
        try:
            shapes = [tuple(int(v) for v in s.split("x")) for s in self.shapes.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigurationError(f"bad shapes {self.shapes!r}") from exc
        if not shapes or any(len(s) != 4 for s in shapes):
            raise ConfigurationError("each shape must be FxCxKHxKW")
        return shapes

    def stride_list(self) -> list[int]:
        return _ints(self.strides)

    def lam_list(self) -> list[float]:
        return _floats(self.lams)

    def eta_list(self) -> list[float]:
        return _floats(self.eta_l)

    def k_fb_list(self) -> list[float]:
        return _floats(self.k_fb_grid)

    def sigma_list(self) -> list[float]:
        return _floats(self.sigma_grid)

    def resize_hw(self) -> tuple[int, int] | None:
        if not self.resize:
            return None
        try:
            h, w = (int(v) for v in self.resize.lower().split("x"))
        except ValueError as exc:
            raise ConfigurationError(f"resize must be HxW, got {self.resize!r}") from exc
        return h, w

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def build_network(self) -> NetworkConfig:
        return build_network(
            self.layer_shapes(), self.stride_list(), self.lam_list(),
            k_fb=self.k_fb, t_stab=self.t_stab, max_iters=self.max_iters,
            seed=self.seed, dtype=self.torch_dtype,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, eta_l=tuple(self.eta_list()), momentum=self.momentum,
            batch_size=self.batch_size, seed=self.seed,
        )

    def cache_root(self) -> str:
        return self.cache_dir or os.environ.get(CACHE_ENV) or os.path.join(self.out_dir, "cache")

    def checkpoint_path(self) -> str:
        return self.checkpoint or os.path.join(self.out_dir, "train", "checkpoint.sdpc")


CFD_DEFAULTS = {
    "dataset": "images",
    "grayscale": True,
    "resize": "120x170",
    "n_train": 721,
    "n_test": 400,
    "shapes": "64x1x9x9,128x64x9x9",
    "strides": "3,1",
    "lams": "0.3,1.6",
}
