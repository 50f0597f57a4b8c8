"""Accuracy reports, test-time-augmented evaluation and weighted ensembles."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import AugPolicy, center_crop, tta_predict
from .data import Dataset
from .errors import ConfigError
from .loss import cross_entropy, one_hot


@dataclass(frozen=True)
class TTAConfig:
    policy: AugPolicy = AugPolicy.MINIMAL
    k: int = 4
    seed: int = 0

    @property
    def active(self):
        return self.k > 0 and AugPolicy(self.policy) is not AugPolicy.NONE


@dataclass
class EvalReport:
    accuracy: float
    error_rate: float
    confusion: np.ndarray  # rows: true class, columns: predicted class
    n: int
    loss: float

    @classmethod
    def from_probs(cls, probs, labels, num_classes) -> "EvalReport":
        labels = np.asarray(labels, dtype=np.intp)
        pred = np.argmax(probs, axis=1)
        confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(confusion, (labels, pred), 1)
        n = len(labels)
        acc = float(np.trace(confusion)) / n
        loss = cross_entropy(probs, one_hot(labels, num_classes, dtype=np.float64))
        return cls(acc, 1.0 - acc, confusion, n, loss)


def _check_dataset(net, ds: Dataset):
    if len(ds) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    if ds.num_classes != net.num_classes:
        raise ConfigError(f"dataset has {ds.num_classes} classes, network predicts {net.num_classes}")


def predict_dataset(net, ds: Dataset, tta: TTAConfig | None = None, batch_size=64) -> np.ndarray:
    """Class probabilities ``[len(ds), K]`` for every item, in dataset order."""
    _check_dataset(net, ds)
    if tta is not None and tta.active:
        return np.stack([
            tta_predict(net, ds.image(i), tta.policy, tta.k, np.random.default_rng([tta.seed, 0x77A, i]))
            for i in range(len(ds))
        ])
    out = []
    for start in range(0, len(ds), batch_size):
        idx = range(start, min(start + batch_size, len(ds)))
        x = np.stack([center_crop(ds.image(i), net.input_size) for i in idx])
        out.append(net.predict_proba(x))
    return np.concatenate(out)


def evaluate(net, ds: Dataset, tta: TTAConfig | None = None, batch_size=64) -> EvalReport:
    probs = predict_dataset(net, ds, tta, batch_size)
    return EvalReport.from_probs(probs, ds.labels, net.num_classes)


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class EnsembleMember:
    net: object
    weight: float = 1.0
    name: str = ""


@dataclass
class EnsembleSpec:
    members: list

    def __post_init__(self):
        if len(self.members) < 2:
            raise ConfigError("an ensemble needs at least 2 members")
        for m in self.members:
            if not (np.isfinite(m.weight) and m.weight > 0):
                raise ConfigError(f"member {m.name or '?'} has invalid weight {m.weight}")
        first = self.members[0].net
        for m in self.members[1:]:
            if m.net.num_classes != first.num_classes or (
                    first.classes is not None and m.net.classes is not None and m.net.classes != first.classes):
                raise ConfigError(f"member {m.name or '?'} has a different class vocabulary")

    @property
    def num_classes(self):
        return self.members[0].net.num_classes

    @property
    def total_weight(self):
        return float(sum(m.weight for m in self.members))


def combine(member_probs, weights) -> np.ndarray:
    """Weighted average, reduced in member order: ``sum(w_m p_m) / sum(w_m)``."""
    acc = 0.0
    for p, w in zip(member_probs, weights):
        acc = acc + np.float64(w) * np.asarray(p, dtype=np.float64)
    return acc / float(sum(weights))


def ensemble_predict(spec: EnsembleSpec, img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    probs = [m.net.predict_proba(center_crop(img, m.net.input_size)[None])[0] for m in spec.members]
    return combine(probs, [m.weight for m in spec.members])


@dataclass
class ErrorDecomposition:
    """How the ensemble's error relates to its members'.

    ``ensemble_brier == mean_member_brier - ambiguity`` holds exactly (weighted
    means over members), so averaging can never do worse than the average
    member on squared error.
    """

    member_error_rates: list
    ensemble_error_rate: float
    mean_member_brier: float
    ambiguity: float
    ensemble_brier: float


@dataclass
class EnsembleResult:
    report: EvalReport
    member_reports: list
    decomposition: ErrorDecomposition
    probs: np.ndarray = field(repr=False)


def ensemble_evaluate(spec: EnsembleSpec, ds: Dataset, batch_size=64, tta: TTAConfig | None = None) -> EnsembleResult:
    member_probs = [predict_dataset(m.net, ds, tta, batch_size) for m in spec.members]
    weights = [m.weight for m in spec.members]
    probs = combine(member_probs, weights)
    labels = ds.labels
    report = EvalReport.from_probs(probs, labels, spec.num_classes)
    member_reports = [EvalReport.from_probs(p, labels, spec.num_classes) for p in member_probs]

    target = one_hot(labels, spec.num_classes, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64) / sum(weights)
    briers = [np.mean(np.sum((p - target) ** 2, axis=1)) for p in member_probs]
    spread = [np.mean(np.sum((p - probs) ** 2, axis=1)) for p in member_probs]
    decomposition = ErrorDecomposition(
        member_error_rates=[r.error_rate for r in member_reports],
        ensemble_error_rate=report.error_rate,
        mean_member_brier=float(np.dot(w, briers)),
        ambiguity=float(np.dot(w, spread)),
        ensemble_brier=float(np.mean(np.sum((probs - target) ** 2, axis=1))),
    )
    return EnsembleResult(report, member_reports, decomposition, probs)
