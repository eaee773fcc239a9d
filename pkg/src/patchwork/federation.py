"""In-process simulation of synchronous FedAvg over patchwork clients.

Each global round: every client runs a local round, uploads the tensors of
its observed modalities' VAEs plus the fusion stack, the server averages
every tensor over the clients that uploaded it (weighted by sample count),
and broadcasts the result back. Clients also receive decoder-only copies of
the modalities they never observe, for imputation.
"""
from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import DropPolicy, MultiModalDataset
from .errors import AggregationError, ConfigurationError, PreconditionError
from .training import Adam, ModelBundle, TrainConfig, build_bundle, local_round
from .vae import ModalityVAE, VaeConfig

MAGIC = b"GPL1"


@dataclass
class ClientState:
    client_id: int
    observed: frozenset[int]
    shard: MultiModalDataset
    bundle: ModelBundle
    rng: np.random.Generator
    optimizer: Adam | None = None

    @property
    def sample_count(self) -> int:
        return self.shard.n


@dataclass
class ParamPackage:
    client_id: int
    weight: int
    tensors: dict[str, np.ndarray]


@dataclass
class GlobalModel:
    tensors: dict[str, np.ndarray]
    round_index: int = 0

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<q", self.round_index))
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name], dtype="<f8")
            h.update(name.encode())
            h.update(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            h.update(arr.tobytes())
        return h.hexdigest()

    def modalities(self) -> set[int]:
        return {int(n.split(".")[1]) for n in self.tensors if n.startswith("vae.")}


@dataclass
class FederationConfig:
    global_rounds: int = 20
    local_steps_per_round: int = 50
    workers: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.global_rounds < 1:
            raise ConfigurationError("global_rounds must be >= 1")
        if self.local_steps_per_round < 1:
            raise ConfigurationError("local_steps_per_round must be >= 1")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")


def build_patchwork(n_clients: int, n_modalities: int, policy: DropPolicy, rng: np.random.Generator,
                    max_retries: int = 100) -> list[frozenset[int]]:
    """Observed-modality sets, one per client.

    Every client keeps at least one modality and every modality is observed
    by some client; draws violating either are repeated up to ``max_retries``.
    """
    if n_modalities < 2:
        raise ConfigurationError("patchwork needs at least two modalities")
    if policy.mode == "exact" and policy.k >= n_modalities:
        raise ConfigurationError(f"cannot drop {policy.k} of {n_modalities} modalities")
    everything = frozenset(range(n_modalities))
    for _ in range(max_retries):
        sets = []
        for _ in range(n_clients):
            if policy.mode == "exact":
                dropped = rng.choice(n_modalities, size=policy.k, replace=False)
                sets.append(everything - {int(m) for m in dropped})
            else:
                keep = rng.random(n_modalities) >= policy.p
                sets.append(frozenset(int(m) for m in np.flatnonzero(keep)))
        if all(sets) and frozenset().union(*sets) == everything:
            return sets
    raise ConfigurationError(f"no valid patchwork after {max_retries} draws; drop policy too aggressive")


def package(client: ClientState) -> ParamPackage:
    """Deep copy of the client's observed-modality VAEs and fusion stack."""
    tensors = {name: p.data.copy() for name, p in client.bundle.trainable().items()}
    return ParamPackage(client.client_id, client.sample_count, tensors)


def fedavg(packages: Sequence[ParamPackage], prev: GlobalModel) -> GlobalModel:
    """Sample-count weighted mean of every tensor over the packages holding it.

    Summation runs in ascending client id so the result does not depend on
    package order. Names nobody uploaded keep their previous value.
    """
    if not packages:
        raise PreconditionError("fedavg needs at least one package")
    ordered = sorted(packages, key=lambda p: p.client_id)
    out: dict[str, np.ndarray] = {}
    names = sorted(set(prev.tensors).union(*(p.tensors for p in ordered)))
    for name in names:
        contributors = [p for p in ordered if name in p.tensors]
        if not contributors:
            out[name] = prev.tensors[name].copy()
            continue
        shapes = {p.tensors[name].shape for p in contributors}
        if name in prev.tensors:
            shapes.add(prev.tensors[name].shape)
        if len(shapes) > 1:
            raise AggregationError(f"tensor {name!r} has conflicting shapes {sorted(shapes)}")
        first = contributors[0].tensors[name]
        if all(np.array_equal(p.tensors[name], first) for p in contributors[1:]):
            out[name] = first.copy()
            continue
        total = float(sum(p.weight for p in contributors))
        acc = np.zeros(contributors[0].tensors[name].shape)
        for p in contributors:
            acc += (p.weight / total) * p.tensors[name]
        out[name] = acc
    return GlobalModel(out, prev.round_index + 1)


def _copy_into(params, tensors) -> None:
    for name, p in params.items():
        p.data = tensors[name].copy()


def broadcast(global_model: GlobalModel, clients: Sequence[ClientState]) -> None:
    """Overwrite each client's trainable tensors and refresh its decoder cache."""
    modalities = global_model.modalities()
    for client in clients:
        bundle = client.bundle
        _copy_into(bundle.trainable(), global_model.tensors)
        for m in sorted(modalities - set(bundle.vaes)):
            dec = bundle.shared_decoders.get(m)
            if dec is None:
                dec = ModalityVAE(m, bundle.vae_cfg, np.random.default_rng(0), with_encoder=False)
                bundle.shared_decoders[m] = dec
            _copy_into(dec.params, global_model.tensors)


def init_global(vae_cfg: VaeConfig, n_modalities: int, method: str, n_blocks: int, groups: int,
                seed: int) -> GlobalModel:
    """Server-side initialization covering every modality."""
    full = build_bundle(range(n_modalities), vae_cfg, n_modalities, method, n_blocks, groups,
                        np.random.default_rng(seed))
    return GlobalModel({n: p.data.copy() for n, p in full.trainable().items()}, 0)


def global_bundle(global_model: GlobalModel, vae_cfg: VaeConfig, n_modalities: int, method: str,
                  n_blocks: int, groups: int) -> ModelBundle:
    """A bundle holding every modality's VAE, loaded from the global model."""
    bundle = build_bundle(range(n_modalities), vae_cfg, n_modalities, method, n_blocks, groups)
    _copy_into(bundle.trainable(), global_model.tensors)
    return bundle


def make_clients(shards: Sequence[MultiModalDataset], observed: Sequence[frozenset[int]],
                 vae_cfg: VaeConfig, n_modalities: int, method: str, n_blocks: int, groups: int,
                 seed: int) -> list[ClientState]:
    """One client per shard; client rngs are independent children of ``seed``."""
    children = np.random.SeedSequence(seed).spawn(len(shards))
    clients = []
    for i, (shard, obs, ss) in enumerate(zip(shards, observed, children)):
        bundle = build_bundle(obs, vae_cfg, n_modalities, method, n_blocks, groups)
        clients.append(ClientState(i, frozenset(obs), shard.restrict(obs), bundle, np.random.default_rng(ss)))
    return clients


RoundHook = Callable[[int, GlobalModel, Sequence[ClientState]], dict[int, dict[str, float]] | None]


def run_federation(clients: Sequence[ClientState], cfg: FederationConfig, initial: GlobalModel,
                   eval_hook: RoundHook | None = None) -> tuple[GlobalModel, list[dict]]:
    """Alternate local rounds and FedAvg for ``cfg.global_rounds`` rounds.

    Returns the final global model and metric rows
    ``{round, client_id, mean_local_loss, gq, rq}``. ``eval_hook`` may return
    per-client ``{"gq": .., "rq": ..}`` for a round; missing values stay None.
    """
    if not clients:
        raise PreconditionError("federation needs at least one client")
    train = TrainConfig(cfg.train.lambda_, cfg.train.beta, cfg.train.learning_rate,
                        cfg.train.batch_size, cfg.local_steps_per_round, cfg.train.seed)
    model = initial
    broadcast(model, clients)
    rows: list[dict] = []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for r in range(1, cfg.global_rounds + 1):
            if pool is None:
                traces = [local_round(c, train) for c in clients]
            else:
                traces = list(pool.map(lambda c: local_round(c, train), clients))
            model = fedavg([package(c) for c in clients], model)
            broadcast(model, clients)
            extra = eval_hook(r, model, clients) if eval_hook else None
            for c, trace in zip(clients, traces):
                metrics = (extra or {}).get(c.client_id, {})
                rows.append({"round": r, "client_id": c.client_id,
                             "mean_local_loss": float(np.mean(trace)),
                             "gq": metrics.get("gq"), "rq": metrics.get("rq")})
    finally:
        if pool is not None:
            pool.shutdown()
    return model, rows


# checkpoint I/O ------------------------------------------------------------


def save_checkpoint(model: GlobalModel, path) -> None:
    """Write ``GPL1``, tensor count, then per tensor: name, rank, dims, float64 values.

    Integers are little-endian uint32; the name is uint32-length-prefixed UTF-8.
    The round index is not part of the format.
    """
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(model.tensors)))
        for name in sorted(model.tensors):
            arr = np.asarray(model.tensors[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, round_index: int = 0) -> GlobalModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a GPL1 checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        try:
            vals = struct.unpack_from(fmt, blob, pos)
        except struct.error:
            raise ValueError(f"{path}: truncated checkpoint") from None
        pos += struct.calcsize(fmt)
        return vals

    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (n,) = take("<I")
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        if pos + 8 * size > len(blob):
            raise ValueError(f"{path}: truncated data for tensor {name!r}")
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(tuple(dims)).astype(np.float64)
        pos += 8 * size
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes")
    return GlobalModel(tensors, round_index)
