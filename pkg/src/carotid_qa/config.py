"""Single JSON run configuration with one section per stage.

Section seeds default to the global seed (the training cohort uses
``seed + 1000`` so it never coincides with the evaluation cohort). A seed
written inside a section wins over the global one.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError, MissingArtifact
from .phantom import CohortSpec
from .predictor import PredictorConfig, TrainConfig
from .sim import SweepConfig
from .uncertainty import EnsembleConfig

TRAIN_COHORT_SEED_SHIFT = 1000
VERBOSITY = ("quiet", "info", "debug")


@dataclass(frozen=True)
class DatasetConfig:
    n_participants: int = 10
    n_patches: int = 1000
    max_offset: float = 0.5
    noise_levels: tuple = (0.0,)

    def __post_init__(self):
        object.__setattr__(self, "noise_levels", tuple(float(x) for x in self.noise_levels))
        if self.n_participants < 2:
            raise ConfigError("training cohort needs at least 2 participants for a validation split")
        if not 1 <= self.n_patches <= 2000:
            raise ConfigError("n_patches must lie in [1, 2000]")
        if not 0 <= self.max_offset < 1:
            raise ConfigError("max_offset must lie in [0, 1)")
        if not self.noise_levels or any(not 0 <= a <= 1 for a in self.noise_levels):
            raise ConfigError("noise_levels must be a non-empty list of values in [0, 1]")


def _section(cls, obj, name, **defaults):
    if obj is None:
        obj = {}
    if not isinstance(obj, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"unknown key in {name!r}: {unknown[0]}")
    merged = {k: v for k, v in defaults.items() if k in known}
    merged.update(obj)
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: Path = Path("out")
    verbosity: str = "info"
    cohort: CohortSpec = field(default_factory=CohortSpec)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train_cohort: CohortSpec = field(default_factory=CohortSpec)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    sweep_noise: SweepConfig = field(default_factory=lambda: SweepConfig("noise"))
    sweep_offset: SweepConfig = field(
        default_factory=lambda: SweepConfig("offset", tuple(round(0.1 * i, 1) for i in range(16))))
    source: dict = field(default_factory=dict, repr=False)

    TOP_KEYS = ("seed", "output_dir", "verbosity", "cohort", "dataset", "predictor", "train",
                "ensemble", "sweep_noise", "sweep_offset")

    @classmethod
    def from_dict(cls, obj, base_dir=".", seed=None):
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(obj) - set(cls.TOP_KEYS))
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        g = int(obj.get("seed", 0) if seed is None else seed)
        verbosity = obj.get("verbosity", "info")
        if verbosity not in VERBOSITY:
            raise ConfigError(f"verbosity must be one of {VERBOSITY}")
        out = Path(obj.get("output_dir", "out"))
        if not out.is_absolute():
            out = Path(base_dir) / out
        cohort = _section(CohortSpec, obj.get("cohort"), "cohort", seed=g)
        dataset = _section(DatasetConfig, obj.get("dataset"), "dataset")
        train_cohort = replace(cohort, n_participants=dataset.n_participants,
                               seed=cohort.seed + TRAIN_COHORT_SEED_SHIFT)
        ens = _section(EnsembleConfig, obj.get("ensemble"), "ensemble", base_seed=g)
        sweeps = {}
        for name, exp in (("sweep_noise", "noise"), ("sweep_offset", "offset")):
            sec = dict(obj.get(name) or {})
            if "experiment" in sec and sec["experiment"] != exp:
                raise ConfigError(f"{name}.experiment must be {exp!r}")
            sec["experiment"] = exp
            default = getattr(cls(), name)
            sweeps[name] = _section(SweepConfig, sec, name, levels=default.levels, seed=g,
                                    n_dropout=ens.n_dropout, include_original=ens.include_original)
        return cls(
            seed=g, output_dir=out, verbosity=verbosity, cohort=cohort, dataset=dataset,
            train_cohort=train_cohort,
            predictor=_section(PredictorConfig, obj.get("predictor"), "predictor", seed=g),
            train=_section(TrainConfig, obj.get("train"), "train", seed=g),
            ensemble=ens, sweep_noise=sweeps["sweep_noise"], sweep_offset=sweeps["sweep_offset"],
            source=obj,
        )

    @classmethod
    def load(cls, path, seed=None):
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            obj = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        return cls.from_dict(obj, p.parent, seed)

    # artifact layout -------------------------------------------------------
    @property
    def cohort_dir(self):
        return self.output_dir / "cohort"

    @property
    def model_dir(self):
        return self.output_dir / "model"

    @property
    def weights_path(self):
        return self.model_dir / "weights.pqw"

    @property
    def segment_dir(self):
        return self.output_dir / "segment"

    @property
    def sweep_dir(self):
        return self.output_dir / "sweeps"

    @property
    def report_dir(self):
        return self.output_dir / "report"

    def resolved(self):
        """Effective settings after defaults and seed derivation (written next to artifacts)."""
        d = {
            "seed": self.seed,
            "cohort": self.cohort.to_dict(),
            "train_cohort": self.train_cohort.to_dict(),
            "dataset": asdict(self.dataset),
            "predictor": self.predictor.to_dict(),
            "train": self.train.to_dict(),
            "ensemble": self.ensemble.to_dict(),
            "sweep_noise": self.sweep_noise.to_dict(),
            "sweep_offset": self.sweep_offset.to_dict(),
        }
        d["dataset"]["noise_levels"] = list(self.dataset.noise_levels)
        return d


def require(path, what):
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"missing {what}: expected {p}")
    return p
