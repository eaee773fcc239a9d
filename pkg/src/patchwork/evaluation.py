"""Generation quality, representation quality and noise-robustness probes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import MultiModalDataset, corrupt, noise_scale
from .errors import PreconditionError
from .training import ModelBundle, infer_features, infer_impute

log = logging.getLogger(__name__)

DEFAULT_S_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


class OracleClassifier:
    """Nearest-prototype classifier per modality; optimal for the synthetic data."""

    def __init__(self, prototypes: np.ndarray):
        self.prototypes = np.asarray(prototypes, dtype=np.float64)

    def predict(self, modality: int, X: np.ndarray) -> np.ndarray:
        P = self.prototypes[modality]
        d2 = (X * X).sum(1)[:, None] - 2.0 * X @ P.T + (P * P).sum(1)[None, :]
        return np.argmin(d2, axis=1)

    def noise_scale(self, modality: int) -> float:
        return noise_scale(self.prototypes[modality])


def score_imputations(imputed: Mapping[int, np.ndarray], labels: np.ndarray, oracle: OracleClassifier) -> float:
    """Fraction of imputed views the oracle labels correctly, averaged over modalities."""
    if not imputed:
        log.warning("nothing imputed; generation quality is vacuously 1.0")
        return 1.0
    return float(np.mean([np.mean(oracle.predict(m, imputed[m]) == labels) for m in sorted(imputed)]))


def generation_quality(bundle: ModelBundle, test: MultiModalDataset, missing, oracle: OracleClassifier,
                       observed: Mapping[int, np.ndarray] | None = None, seed: int = 0) -> float:
    """Impute ``missing`` from the remaining views of ``test`` and score with the oracle.

    ``observed`` overrides the conditional inputs (e.g. with corrupted views).
    """
    if test.n == 0:
        raise PreconditionError("empty test set")
    missing = sorted(set(missing))
    if not missing:
        log.warning("no missing modalities; generation quality is vacuously 1.0")
        return 1.0
    if observed is None:
        observed = {m: v for m, v in test.views.items() if m not in missing}
    return score_imputations(infer_impute(bundle, observed, missing, seed), test.labels, oracle)


def leave_one_out_gq(bundle: ModelBundle, test: MultiModalDataset, oracle: OracleClassifier,
                     seed: int = 0) -> dict[int, float]:
    """GQ for imputing each modality in turn from all the others."""
    return {m: generation_quality(bundle, test, {m}, oracle, seed=seed) for m in sorted(test.views)}


# representation quality ----------------------------------------------------


@dataclass
class ProbeClassifier:
    """Multinomial logistic regression fit by full-batch gradient descent.

    Features are standardized with training statistics; the objective is mean
    cross-entropy plus ``l2 / 2 * ||W||^2``.
    """
    n_classes: int
    l2: float = 1e-3
    max_steps: int = 500
    learning_rate: float = 0.5
    tol: float = 1e-6
    W: np.ndarray | None = field(default=None, repr=False)
    b: np.ndarray | None = field(default=None, repr=False)

    def _standardize(self, X):
        return (X - self.mean_) / self.scale_

    def fit(self, X: np.ndarray, y: np.ndarray) -> "ProbeClassifier":
        self.mean_ = X.mean(0)
        self.scale_ = X.std(0) + 1e-12
        Xs = self._standardize(X)
        n, k = Xs.shape
        Y = np.eye(self.n_classes)[y]
        W, b = np.zeros((k, self.n_classes)), np.zeros(self.n_classes)
        prev = np.inf
        for self.n_steps_ in range(1, self.max_steps + 1):
            P = _softmax(Xs @ W + b)
            loss = -np.mean(np.log(P[np.arange(n), y] + 1e-300)) + 0.5 * self.l2 * np.sum(W * W)
            G = (P - Y) / n
            W -= self.learning_rate * (Xs.T @ G + self.l2 * W)
            b -= self.learning_rate * G.sum(0)
            if prev - loss < self.tol:
                break
            prev = loss
        self.W, self.b = W, b
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self._standardize(X) @ self.W + self.b, axis=1)

    def score(self, X: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(X) == y))


def _softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


@dataclass
class ClientSplit:
    """A client's full-view local data, split for the downstream probe."""
    client_id: int
    observed: frozenset[int]
    train: MultiModalDataset
    test: MultiModalDataset


@dataclass
class RQResult:
    accuracies: dict[int, float]
    degenerate: dict[int, bool]

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.accuracies.values())))


def probe_accuracy(X_train, y_train, X_test, y_test, n_classes: int) -> tuple[float, bool]:
    """Accuracy of a probe fit on the train split; flags single-class training data."""
    if len(np.unique(y_train)) < 2:
        majority = np.bincount(y_train, minlength=n_classes).argmax()
        return float(np.mean(y_test == majority)), True
    probe = ProbeClassifier(n_classes).fit(X_train, y_train)
    return probe.score(X_test, y_test), False


def representation_quality(bundles: Mapping[int, ModelBundle], splits: Sequence[ClientSplit],
                           n_classes: int, seed: int = 0) -> RQResult:
    """Per-client probe accuracy on concatenated observed + imputed latents."""
    acc, degenerate = {}, {}
    for split in splits:
        bundle = bundles[split.client_id]
        missing = set(range(bundle.n_modalities)) - split.observed

        def feats(ds):
            return infer_features(bundle, {m: ds.views[m] for m in split.observed}, missing, seed)

        acc[split.client_id], degenerate[split.client_id] = probe_accuracy(
            feats(split.train), split.train.labels, feats(split.test), split.test.labels, n_classes)
    return RQResult(acc, degenerate)


# robustness -----------------------------------------------------------------


@dataclass
class SweepResult:
    method: str
    missing: int
    s_grid: list[float]
    per_modality: dict[int, list[float]]

    @property
    def min_gq(self) -> list[float]:
        return [min(col) for col in zip(*self.per_modality.values())]

    def rows(self, seed: int):
        for m, gqs in sorted(self.per_modality.items()):
            for s, gq in zip(self.s_grid, gqs):
                yield {"method": self.method, "seed": seed, "noised_modality": m, "scale": s, "gq": gq}


def robustness_sweep(bundle: ModelBundle, test: MultiModalDataset, missing: int, oracle: OracleClassifier,
                     s_grid: Sequence[float] = DEFAULT_S_GRID, seed: int = 0) -> SweepResult:
    """GQ of ``missing`` as each conditional modality alone is corrupted at every scale.

    The same noise draw is reused across scales, so each curve is an
    interpolation towards one fixed noise realization.
    """
    s_grid = sorted(float(s) for s in s_grid)
    if 0.0 not in s_grid:
        raise PreconditionError("s_grid must include 0")
    cond = sorted(m for m in test.views if m != missing)
    clean = {m: test.views[m] for m in cond}
    per_modality = {}
    for m in cond:
        rng = np.random.default_rng([seed, m])
        noise = oracle.noise_scale(m) * rng.standard_normal(clean[m].shape)
        curve = []
        for s in s_grid:
            observed = dict(clean)
            observed[m] = clean[m] if s == 0.0 else corrupt(clean[m], s, noise=noise)
            curve.append(generation_quality(bundle, test, {missing}, oracle, observed, seed))
        per_modality[m] = curve
    return SweepResult(bundle.method, missing, s_grid, per_modality)


@dataclass
class CollapseResult:
    sensitivity: dict[int, float]
    score: float
    clean_gq: float
    defined: bool = True


def collapse_diagnostic(bundle: ModelBundle, test: MultiModalDataset, missing: int, oracle: OracleClassifier,
                        seed: int = 0) -> CollapseResult:
    """Per-modality GQ drop when that conditional is replaced by pure noise.

    The collapse score is max/min sensitivity; sensitivities are floored at
    one test sample's worth of accuracy so an ignored modality gives a large
    finite score rather than a division by zero.
    """
    sweep = robustness_sweep(bundle, test, missing, oracle, (0.0, 1.0), seed)
    clean = sweep.per_modality[next(iter(sweep.per_modality))][0]
    sensitivity = {m: clean - gqs[-1] for m, gqs in sweep.per_modality.items()}
    if clean == 0:
        return CollapseResult(sensitivity, float("nan"), clean, defined=False)
    floor = 1.0 / test.n
    vals = [max(v, floor) for v in sensitivity.values()]
    return CollapseResult(sensitivity, max(vals) / min(vals), clean)
