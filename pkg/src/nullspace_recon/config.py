"""Experiment configuration: nested dataclasses stored as a YAML key-value file."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import PhantomSpec
from .operators import DEFAULT_TAU, LimitedAngleRadonOp, MaskedFourierOp
from .recon import METHODS

STUDIES = ("limited_angle_ct", "masked_fourier")


@dataclass
class CTGeometry:
    n_angles: int = 30
    max_angle: float = 120.0
    detector_bins: int = None  # ceil(sqrt(2) * grid) when unset
    tau: float = DEFAULT_TAU


@dataclass
class FourierGeometry:
    kept_fraction: float = 0.25
    center_fraction: float = 0.08
    mask_seed: int = 0


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-3
    seed: int = 0
    base_channels: int = 16
    depth: int = 3


@dataclass
class EvalSettings:
    # relative noise levels, measured on the pseudoinverse reconstruction
    noise_levels: list = field(default_factory=lambda: [0.0, 0.02, 0.04])
    noise_seed: int = 7
    square_size: int = 10
    square_intensity: float = 1.0
    salt_pepper_size: int = 12
    salt_pepper_probability: float = 0.5
    ood_images: int = 8
    n_panels: int = 4
    uq_images: int = 50


@dataclass
class ExperimentConfig:
    study: str = "limited_angle_ct"
    grid: int = 64
    ct: CTGeometry = field(default_factory=CTGeometry)
    fourier: FourierGeometry = field(default_factory=FourierGeometry)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    n_train: int = 2000
    n_test: int = 200
    n_val: int = 20
    methods: list = field(default_factory=lambda: list(METHODS))
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    landweber_steps: int = 15
    landweber_stepsize: float = None  # 0.003 for CT, 1.0 for Fourier when unset
    out: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.study not in STUDIES:
            raise ValueError(f"study must be one of {STUDIES}, got {self.study!r}")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; cascades longer than 2 are not supported")
        if self.grid % 4:
            raise ValueError("grid must be divisible by 4")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be positive")
        if self.n_val < 0:
            raise ValueError("n_val must be non-negative")
        self.phantom.grid = self.grid

    def apply_full(self):
        """Switch to the 192x192, 60-angle geometry."""
        self.grid = 192
        self.ct.n_angles = 60
        self.validate()
        return self

    def build_operator(self, compute_svd=True):
        if self.study == "masked_fourier":
            f = self.fourier
            return MaskedFourierOp.from_fraction(self.grid, f.kept_fraction, f.center_fraction,
                                                 f.mask_seed)
        c = self.ct
        op = LimitedAngleRadonOp.limited(self.grid, c.n_angles, c.max_angle,
                                         detector_bins=c.detector_bins, tau=c.tau)
        return op.compute_svd() if compute_svd else op

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["phantom"] = self.phantom.as_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        nested = {"ct": CTGeometry, "fourier": FourierGeometry, "train": TrainSettings,
                  "eval": EvalSettings}
        kwargs = {}
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, value in d.items():
            if key in nested:
                value = _build(nested[key], value)
            elif key == "phantom":
                value = PhantomSpec.from_dict(value)
            kwargs[key] = value
        return cls(**kwargs)

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, value):
    value = value or {}
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(value) - names
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**value)


def load_config(path=None):
    if path is None:
        return ExperimentConfig()
    data = yaml.safe_load(Path(path).read_text()) or {}
    return ExperimentConfig.from_dict(data)


def save_config(config, path):
    Path(path).write_text(config.dump())
