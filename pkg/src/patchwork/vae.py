"""Per-modality beta-VAE: MLP encoder to (mu, logvar) and MLP decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import (DimensionError, Parameter, Tensor, as_tensor, gaussian_kl, linear,
                      recon_nll, relu, reparameterize, clamp)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0

ENCODER_LAYERS = ("enc1", "enc2", "mu", "logvar")
DECODER_LAYERS = ("dec1", "dec2", "out")


@dataclass
class VaeConfig:
    input_dim: int = 32
    latent_dim: int = 16
    hidden_dim: int = 64
    beta: float = 1.0
    likelihood: str = "gaussian"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.likelihood not in ("gaussian", "bernoulli"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        for name in ("input_dim", "latent_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def _dense(prefix: str, fan_in: int, fan_out: int, rng: np.random.Generator,
           gain: float = 2.0) -> dict[str, Parameter]:
    W = rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)
    return {f"{prefix}.W": Parameter(f"{prefix}.W", W),
            f"{prefix}.b": Parameter(f"{prefix}.b", np.zeros(fan_out))}


class ModalityVAE:
    """Encoder ``x -> h -> h -> (mu, logvar)`` and mirrored decoder ``z -> h -> h -> x``.

    Parameter names are ``vae.<modality_id>.<layer>.<W|b>``.
    """

    def __init__(self, modality_id: int, cfg: VaeConfig, rng: np.random.Generator,
                 with_encoder: bool = True):
        self.modality_id = modality_id
        self.input_dim = cfg.input_dim
        self.latent_dim = cfg.latent_dim
        self.hidden_dim = cfg.hidden_dim
        p = self.prefix
        h, d, x = cfg.hidden_dim, cfg.latent_dim, cfg.input_dim
        self.params: dict[str, Parameter] = {}
        if with_encoder:
            self.params.update(_dense(f"{p}.enc1", x, h, rng))
            self.params.update(_dense(f"{p}.enc2", h, h, rng))
            self.params.update(_dense(f"{p}.mu", h, d, rng, gain=1.0))
            self.params.update(_dense(f"{p}.logvar", h, d, rng, gain=0.1))
        self.params.update(_dense(f"{p}.dec1", d, h, rng))
        self.params.update(_dense(f"{p}.dec2", h, h, rng))
        self.params.update(_dense(f"{p}.out", h, x, rng, gain=1.0))

    @property
    def prefix(self) -> str:
        return f"vae.{self.modality_id}"

    def _layer(self, name: str, x: Tensor) -> Tensor:
        return linear(x, self.params[f"{self.prefix}.{name}.W"], self.params[f"{self.prefix}.{name}.b"])

    def encoder_params(self) -> dict[str, Parameter]:
        return {k: v for k, v in self.params.items() if k.split(".")[2] in ENCODER_LAYERS}

    def decoder_params(self) -> dict[str, Parameter]:
        return {k: v for k, v in self.params.items() if k.split(".")[2] in DECODER_LAYERS}

    @property
    def has_encoder(self) -> bool:
        return f"{self.prefix}.enc1.W" in self.params

    def encode(self, x) -> tuple[Tensor, Tensor]:
        if not self.has_encoder:
            raise LookupError(f"modality {self.modality_id} holds a decoder only")
        x = as_tensor(x)
        if x.shape[-1] != self.input_dim:
            raise DimensionError(
                f"modality {self.modality_id} expects input width {self.input_dim}, got {x.shape}")
        h = relu(self._layer("enc2", relu(self._layer("enc1", x))))
        mu = self._layer("mu", h)
        logvar = clamp(self._layer("logvar", h), LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar

    def decode(self, z) -> Tensor:
        z = as_tensor(z)
        if z.shape[-1] != self.latent_dim:
            raise DimensionError(
                f"modality {self.modality_id} decoder expects latent width {self.latent_dim}, got {z.shape}")
        return self._layer("out", relu(self._layer("dec2", relu(self._layer("dec1", z)))))


def encode(vae: ModalityVAE, x) -> tuple[Tensor, Tensor]:
    return vae.encode(x)


def decode(vae: ModalityVAE, z) -> Tensor:
    return vae.decode(z)


def single_loss(vae: ModalityVAE, x, cfg: VaeConfig, rng: np.random.Generator,
                noise: np.ndarray | None = None) -> Tensor:
    """Reconstruction NLL of a reparameterized sample plus ``beta`` times the KL.

    Both terms are summed over features and averaged over the batch. ``noise``
    overrides the draw from ``rng``.
    """
    x = as_tensor(x)
    mu, logvar = vae.encode(x)
    if noise is None:
        noise = rng.standard_normal(mu.shape)
    z = reparameterize(mu, logvar, noise)
    n = x.shape[0]
    loss = recon_nll(vae.decode(z), x, cfg.likelihood)
    if cfg.beta:
        loss = loss + gaussian_kl(mu, logvar) * cfg.beta
    return loss * (1.0 / n)
