"""Local-round objective, optimizer and the two inference paths.

A client with observed set ``O`` treats every modality of ``O`` in turn as
the target and the rest as conditionals. The imputation loss decodes the
fused target latent with the target's decoder; the single-modality beta-VAE
loss is added with weight ``lambda_``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping

import numpy as np

from .errors import CapabilityError, PreconditionError
from .fusion import FusionStack, fuse, poe_fuse
from .numeric import Parameter, Tensor, add, concat, mul, no_grad, recon_nll, reparameterize
from .vae import ModalityVAE, VaeConfig, single_loss

if TYPE_CHECKING:
    from .federation import ClientState

METHODS = ("graphpl", "poe-baseline")


@dataclass
class TrainConfig:
    lambda_: float = 1.0
    beta: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    local_steps: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError("lambda must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class ModelBundle:
    """VAEs of the observed modalities, the fusion stack and cached decoders.

    ``shared_decoders`` holds decoder-only VAEs of unobserved modalities,
    received from the server and used read-only for imputation.
    """
    vaes: dict[int, ModalityVAE]
    fusion: FusionStack | None
    vae_cfg: VaeConfig
    n_modalities: int
    method: str = "graphpl"
    shared_decoders: dict[int, ModalityVAE] = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "graphpl" and self.fusion is None:
            raise ValueError("graphpl bundles need a fusion stack")
        for m, vae in self.vaes.items():
            if self.fusion is not None and vae.latent_dim != self.fusion.latent_dim:
                raise ValueError(f"modality {m} latent dim differs from the fusion width")

    @property
    def latent_dim(self) -> int:
        return self.vae_cfg.latent_dim

    def trainable(self) -> dict[str, Parameter]:
        params: dict[str, Parameter] = {}
        for m in sorted(self.vaes):
            params.update(self.vaes[m].params)
        if self.fusion is not None:
            params.update(self.fusion.params)
        return params

    def decoder_for(self, m: int) -> ModalityVAE:
        if m in self.vaes:
            return self.vaes[m]
        if m in self.shared_decoders:
            return self.shared_decoders[m]
        raise CapabilityError(f"no decoder for modality {m} in this bundle")


def build_bundle(observed, vae_cfg: VaeConfig, n_modalities: int, method: str = "graphpl",
                 n_blocks: int = 2, groups: int = 4, rng: np.random.Generator | None = None) -> ModelBundle:
    rng = rng if rng is not None else np.random.default_rng(0)
    vaes = {m: ModalityVAE(m, vae_cfg, rng) for m in sorted(observed)}
    stack = FusionStack(vae_cfg.latent_dim, n_blocks, groups, rng=rng) if method == "graphpl" else None
    return ModelBundle(vaes, stack, vae_cfg, n_modalities, method)


def _fused_latent(bundle: ModelBundle, mus: Mapping[int, Tensor], logvars: Mapping[int, Tensor],
                  targets, rng: np.random.Generator, sample: bool) -> dict[int, Tensor]:
    """Target latents from conditional posteriors, via the graph or the expert product."""
    if bundle.method == "graphpl":
        if sample:
            cond = {m: reparameterize(mus[m], logvars[m], rng.standard_normal(mus[m].shape)) for m in sorted(mus)}
        else:
            cond = dict(mus)
        return fuse(bundle.fusion, cond, targets, rng)
    mu, logvar = poe_fuse([(mus[m], logvars[m]) for m in sorted(mus)])
    z = reparameterize(mu, logvar, rng.standard_normal(mu.shape)) if sample else mu
    return {t: z for t in targets}


def impute_loss(bundle: ModelBundle, batch: Mapping[int, np.ndarray], target_m: int,
                rng: np.random.Generator) -> Tensor:
    """Batch-mean NLL of the true target view under the decoded fused latent."""
    if target_m not in batch:
        raise PreconditionError(f"target modality {target_m} is not in the batch")
    cond_ids = sorted(m for m in batch if m != target_m)
    if not cond_ids:
        raise PreconditionError("imputation needs at least one conditional modality")
    mus, logvars = {}, {}
    for m in cond_ids:
        mus[m], logvars[m] = bundle.vaes[m].encode(batch[m])
    z = _fused_latent(bundle, mus, logvars, [target_m], rng, sample=True)[target_m]
    x = batch[target_m]
    nll = recon_nll(bundle.vaes[target_m].decode(z), x, bundle.vae_cfg.likelihood)
    return mul(nll, 1.0 / x.shape[0])


def local_loss(bundle: ModelBundle, batch: Mapping[int, np.ndarray], cfg: TrainConfig,
               rng: np.random.Generator) -> Tensor:
    observed = sorted(batch)
    if not observed:
        raise PreconditionError("empty batch")
    vae_cfg = bundle.vae_cfg if bundle.vae_cfg.beta == cfg.beta else VaeConfig(
        bundle.vae_cfg.input_dim, bundle.vae_cfg.latent_dim, bundle.vae_cfg.hidden_dim,
        cfg.beta, bundle.vae_cfg.likelihood)
    single = [single_loss(bundle.vaes[m], batch[m], vae_cfg, rng) for m in observed]
    single_mean = mul(_sum(single), 1.0 / len(single))
    if len(observed) == 1:
        return single_mean
    impute = [impute_loss(bundle, batch, t, rng) for t in observed]
    impute_mean = mul(_sum(impute), 1.0 / len(impute))
    if cfg.lambda_ == 0:
        return impute_mean
    return add(impute_mean, mul(single_mean, cfg.lambda_))


def _sum(terms):
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


class Adam:
    """Adam keyed by parameter name so state survives parameter overwrites."""

    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Parameter]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name in sorted(params):
            p = params[name]
            if p.grad is None or not p.trainable:
                continue
            m = self.m.get(name, 0.0) * b1 + (1 - b1) * p.grad
            v = self.v.get(name, 0.0) * b2 + (1 - b2) * p.grad * p.grad
            self.m[name], self.v[name] = m, v
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def sample_batch(views: Mapping[int, np.ndarray], batch_size: int, rng: np.random.Generator) -> dict[int, np.ndarray]:
    n = len(next(iter(views.values())))
    idx = rng.choice(n, size=batch_size, replace=n < batch_size)
    return {m: v[idx] for m, v in views.items()}


def local_round(client: "ClientState", cfg: TrainConfig) -> list[float]:
    """Run ``cfg.local_steps`` Adam steps on the client's shard; returns the loss trace."""
    if cfg.local_steps < 1:
        raise ValueError("local_steps must be >= 1")
    if client.shard.n == 0:
        raise PreconditionError(f"client {client.client_id} has no data")
    params = client.bundle.trainable()
    if client.optimizer is None:
        client.optimizer = Adam(cfg.learning_rate)
    trace = []
    for _ in range(cfg.local_steps):
        batch = sample_batch(client.shard.views, cfg.batch_size, client.rng)
        for p in params.values():
            p.grad = None
        loss = local_loss(client.bundle, batch, cfg, client.rng)
        loss.backward()
        client.optimizer.step(params)
        trace.append(float(loss.data))
    return trace


def infer_impute(bundle: ModelBundle, observed: Mapping[int, np.ndarray], missing,
                 seed: int = 0) -> dict[int, np.ndarray]:
    """Decode every missing modality from encoder means of the observed ones."""
    missing = sorted(set(missing))
    if not missing:
        return {}
    latents = _missing_latents(bundle, observed, missing, seed)
    with no_grad():
        return {m: bundle.decoder_for(m).decode(latents[m]).data for m in missing}


def _missing_latents(bundle, observed, missing, seed):
    if not observed:
        raise PreconditionError("inference needs at least one observed modality")
    if set(missing) & set(observed):
        raise PreconditionError("missing and observed modalities overlap")
    for m in missing:
        bundle.decoder_for(m)
    with no_grad():
        mus, logvars = {}, {}
        for m in sorted(observed):
            mus[m], logvars[m] = bundle.vaes[m].encode(observed[m])
        return _fused_latent(bundle, mus, logvars, missing, np.random.default_rng(seed), sample=False)


def infer_features(bundle: ModelBundle, observed: Mapping[int, np.ndarray], missing,
                   seed: int = 0) -> np.ndarray:
    """Concatenate observed encoder means and imputed latents in modality order.

    Slice ``[m*d, (m+1)*d)`` always belongs to modality ``m``.
    """
    missing = sorted(set(missing))
    fused = _missing_latents(bundle, observed, missing, seed) if missing else {}
    with no_grad():
        parts = []
        for m in range(bundle.n_modalities):
            if m in observed:
                parts.append(bundle.vaes[m].encode(observed[m])[0])
            elif m in fused:
                parts.append(fused[m])
            else:
                raise PreconditionError(f"modality {m} is neither observed nor listed as missing")
        return concat(parts, axis=-1).data
