"""Synthetic multi-modal data, client partitioning and noise corruption.

Every sample has one class label; the view of modality ``m`` is that
modality's class prototype plus isotropic Gaussian noise. Prototypes differ
across modalities, so views share semantics but not appearance.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DomainError

MARGIN_FACTOR = 6.0


@dataclass(frozen=True)
class SyntheticSpec:
    n_modalities: int = 3
    n_classes: int = 10
    dim: int = 32
    sigma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_modalities < 1 or self.n_classes < 2 or self.dim < 1:
            raise ConfigurationError("need >= 1 modality, >= 2 classes and dim >= 1")
        if self.sigma < 0:
            raise ConfigurationError("sigma must be >= 0")


@dataclass(frozen=True)
class Sample:
    label: int
    views: dict[int, np.ndarray]


@dataclass
class MultiModalDataset:
    """Labels (n,) and one (n, dim) view array per modality."""
    labels: np.ndarray
    views: dict[int, np.ndarray]

    @property
    def n(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Sample:
        return Sample(int(self.labels[i]), {m: v[i] for m, v in self.views.items()})

    def subset(self, idx) -> "MultiModalDataset":
        idx = np.asarray(idx, dtype=int)
        return MultiModalDataset(self.labels[idx], {m: v[idx] for m, v in self.views.items()})

    def restrict(self, modalities) -> "MultiModalDataset":
        return MultiModalDataset(self.labels, {m: self.views[m] for m in sorted(modalities)})


@dataclass(frozen=True)
class DropPolicy:
    """Either drop each modality with probability ``p`` or drop exactly ``k``."""
    mode: str = "exact"
    p: float = 0.0
    k: int = 1

    def __post_init__(self):
        if self.mode not in ("probabilistic", "exact"):
            raise ConfigurationError(f"unknown drop mode {self.mode!r}")
        if not 0.0 <= self.p < 1.0:
            raise ConfigurationError("drop probability must be in [0, 1)")
        if self.k < 0:
            raise ConfigurationError("drop count must be >= 0")


def prototypes(spec: SyntheticSpec) -> np.ndarray:
    """Class prototypes, shape (n_modalities, n_classes, dim), fixed by ``spec.seed``.

    Drawn standard normal, then scaled up if needed so every within-modality
    pair is further apart than ``MARGIN_FACTOR * sigma`` (with 25% slack).
    """
    rng = np.random.default_rng([spec.seed, 0x9E3779B9])
    P = rng.standard_normal((spec.n_modalities, spec.n_classes, spec.dim))
    need = 1.25 * MARGIN_FACTOR * spec.sigma
    worst = min_prototype_distance(P)
    if worst < need:
        P *= need / worst
    assert min_prototype_distance(P) > MARGIN_FACTOR * spec.sigma
    return P


def min_prototype_distance(P: np.ndarray) -> float:
    worst = np.inf
    for proto in P:
        diff = proto[:, None, :] - proto[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        dist[np.diag_indices(len(proto))] = np.inf
        worst = min(worst, dist.min())
    return float(worst)


def generate(spec: SyntheticSpec, n: int, rng: np.random.Generator) -> MultiModalDataset:
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    P = prototypes(spec)
    labels = rng.integers(spec.n_classes, size=n)
    views = {m: P[m, labels] + spec.sigma * rng.standard_normal((n, spec.dim))
             for m in range(spec.n_modalities)}
    return MultiModalDataset(labels, views)


def assign_classes(n_clients: int, n_classes: int, classes_per_client: int,
                   rng: np.random.Generator) -> list[list[int]]:
    """Contiguous windows over a shuffled class order, evenly staggered.

    Client ``i`` starts at ``floor(i * n_classes / n_clients)``; windows wrap,
    so every class is covered whenever ``n_clients * k >= n_classes``.
    """
    if not 1 <= classes_per_client <= n_classes:
        raise ConfigurationError("classes_per_client must be in [1, n_classes]")
    if n_clients * classes_per_client < n_classes:
        raise ConfigurationError(
            f"{n_clients} clients x {classes_per_client} classes cannot cover {n_classes} classes")
    order = rng.permutation(n_classes)
    out = []
    for i in range(n_clients):
        start = i * n_classes // n_clients
        out.append(sorted(int(order[(start + j) % n_classes]) for j in range(classes_per_client)))
    return out


def split_heterogeneous(data: MultiModalDataset, n_clients: int, classes_per_client: int,
                        rng: np.random.Generator, n_classes: int | None = None) -> list[np.ndarray]:
    """Index shards where each client only holds its assigned classes.

    Samples of a class are dealt evenly across the clients holding it, so the
    shards partition the data.
    """
    n_classes = n_classes or int(data.labels.max()) + 1
    assignment = assign_classes(n_clients, n_classes, classes_per_client, rng)
    shards: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(n_classes):
        holders = [i for i, cls in enumerate(assignment) if c in cls]
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        for holder, part in zip(holders, np.array_split(idx, len(holders))):
            shards[holder].append(part)
    return [np.sort(np.concatenate(s)) if s else np.zeros(0, dtype=int) for s in shards]


def train_test_split(n: int, rng: np.random.Generator, test_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(idx[n_test:]), np.sort(idx[:n_test])


def noise_scale(P_m: np.ndarray) -> float:
    """Per-coordinate RMS of a modality's prototypes, the corruption noise std."""
    return float(np.sqrt(np.mean(P_m ** 2)))


def corrupt(view: np.ndarray, s: float, rng: np.random.Generator | None = None,
            scale: float = 1.0, noise: np.ndarray | None = None) -> np.ndarray:
    """Interpolate ``(1 - s) * view + s * noise`` with noise ~ N(0, scale^2 I)."""
    if not 0.0 <= s <= 1.0:
        raise DomainError(f"noise scale s={s} outside [0, 1]")
    view = np.asarray(view, dtype=np.float64)
    if noise is None:
        noise = scale * rng.standard_normal(view.shape)
    return (1.0 - s) * view + s * noise


def export_csv(data: MultiModalDataset, path) -> None:
    """One row per (sample, modality): sample_id,label,modality_id,v0..v{dim-1}."""
    dim = next(iter(data.views.values())).shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", "modality_id"] + [f"v{j}" for j in range(dim)])
        for i in range(data.n):
            for m in sorted(data.views):
                w.writerow([i, int(data.labels[i]), m] + [repr(float(v)) for v in data.views[m][i]])


def patchwork_mask(observed: Sequence[set[int]], n_modalities: int) -> np.ndarray:
    mask = np.zeros((len(observed), n_modalities), dtype=bool)
    for i, obs in enumerate(observed):
        mask[i, sorted(obs)] = True
    return mask
