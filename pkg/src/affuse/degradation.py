"""Seedable modality degradations applied to synchronised activity records."""

from __future__ import annotations

import enum
import json
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .data import MODALITIES, ActivityRecord
from .errors import ValidationError

DROPOUT_RATES = (0.3, 0.5, 0.7)
NOISE_SIGMAS = (0.01, 0.05)


class Kind(str, enum.Enum):
    NONE = "None"
    GAZE_DROPOUT = "GazeDropout"
    GAUSSIAN_NOISE = "GaussianNoise"
    MODALITY_ABSENCE = "ModalityAbsence"


_DEFAULT_TARGETS = {
    Kind.NONE: frozenset(),
    Kind.GAZE_DROPOUT: frozenset({"Gaze"}),
    Kind.GAUSSIAN_NOISE: frozenset({"AU", "Pose"}),
}


@dataclass(frozen=True)
class DegradationSpec:
    kind: Kind = Kind.NONE
    rate: float = 0.0
    sigma: float = 0.0
    targets: frozenset = field(default=None)
    seed: int = 0

    def __post_init__(self):
        kind = Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        targets = self.targets
        if targets is None:
            if kind is Kind.MODALITY_ABSENCE:
                raise ValidationError("ModalityAbsence needs an explicit target modality")
            targets = _DEFAULT_TARGETS[kind]
        if isinstance(targets, str):
            targets = {targets}
        targets = frozenset(targets)
        unknown = targets - set(MODALITIES)
        if unknown:
            raise ValidationError(f"unknown target modalities {sorted(unknown)}")
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "seed", int(self.seed))

        if kind is Kind.GAZE_DROPOUT:
            if targets != {"Gaze"}:
                raise ValidationError(f"GazeDropout targets only Gaze, got {sorted(targets)}")
            if not 0.0 <= self.rate <= 1.0:
                raise ValidationError(f"dropout rate must lie in [0, 1], got {self.rate}")
        elif kind is Kind.GAUSSIAN_NOISE:
            if not self.sigma > 0:
                raise ValidationError(f"noise sigma must be positive, got {self.sigma}")
            if not targets:
                raise ValidationError("GaussianNoise needs at least one target")
        elif kind is Kind.MODALITY_ABSENCE:
            if len(targets) != 1:
                raise ValidationError(f"ModalityAbsence targets exactly one modality, got {sorted(targets)}")
        elif targets:
            raise ValidationError("kind None takes no targets")

    @property
    def label(self):
        if self.kind is Kind.GAZE_DROPOUT:
            return f"Gaze dropout {round(self.rate * 100)}%"
        if self.kind is Kind.GAUSSIAN_NOISE:
            return f"{'+'.join(m for m in MODALITIES if m in self.targets)} N(0, {self.sigma:g})"
        if self.kind is Kind.MODALITY_ABSENCE:
            return f"w/o {next(iter(self.targets))}"
        return "clean"

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def to_dict(self):
        return {"kind": self.kind.value, "rate": self.rate, "sigma": self.sigma,
                "targets": [m for m in MODALITIES if m in self.targets], "seed": self.seed}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"kind", "rate", "sigma", "targets", "seed"}
        if unknown:
            raise ValidationError(f"unknown degradation fields {sorted(unknown)}")
        if "kind" not in d:
            raise ValidationError("degradation spec needs a 'kind'")
        try:
            kind = Kind(d["kind"])
        except ValueError:
            raise ValidationError(f"unknown degradation kind {d['kind']!r}") from None
        targets = d.get("targets")
        return cls(kind=kind, rate=float(d.get("rate", 0.0)), sigma=float(d.get("sigma", 0.0)),
                   targets=None if targets is None else frozenset(targets), seed=int(d.get("seed", 0)))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


CLEAN = DegradationSpec()


def _record_rng(spec, record):
    return np.random.default_rng([spec.seed, zlib.crc32(record.activity_id.encode())])


def apply(spec: DegradationSpec, record: ActivityRecord) -> ActivityRecord:
    """Return a degraded copy of ``record``; the input is never modified."""
    if spec.kind is Kind.NONE:
        return record
    if spec.kind is Kind.MODALITY_ABSENCE:
        return record.replace(absent=record.absent | spec.targets)
    rng = _record_rng(spec, record)
    seqs = dict(record.sequences)
    if spec.kind is Kind.GAZE_DROPOUT:
        gaze = seqs["Gaze"]
        drop = rng.random(gaze.shape[0]) < spec.rate
        out = gaze.copy()
        out[drop] = 0.0
        seqs["Gaze"] = out
    else:
        for m in MODALITIES:
            if m in spec.targets:
                x = seqs[m]
                seqs[m] = x + rng.normal(0.0, spec.sigma, size=x.shape)
    return record.replace(sequences=seqs)


def apply_all(spec, records):
    return [apply(spec, r) for r in records]


def spec_grid(master_seed=0) -> list[DegradationSpec]:
    """The nine robustness conditions: gaze dropout, AU+Pose noise, single-modality absence."""
    seeds = np.random.default_rng(master_seed).choice(2**31 - 1, size=9, replace=False)
    specs = [DegradationSpec(Kind.GAZE_DROPOUT, rate=r) for r in DROPOUT_RATES]
    specs += [DegradationSpec(Kind.GAUSSIAN_NOISE, sigma=s) for s in NOISE_SIGMAS]
    specs += [DegradationSpec(Kind.MODALITY_ABSENCE, targets=frozenset({m})) for m in MODALITIES]
    return [s.with_seed(int(seed)) for s, seed in zip(specs, seeds)]
