"""scikit-learn style wrapper: fit federates over row groups, transform imputes."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import MultiModalDataset
from .federation import FederationConfig, global_bundle, init_global, make_clients, run_federation
from .training import METHODS, TrainConfig, infer_features, infer_impute
from .vae import VaeConfig


class PatchworkImputer(TransformerMixin, BaseEstimator):
    """Impute missing modality blocks with a federated GraphPL (or POE) model.

    ``X`` has ``n_modalities`` equal-width column blocks; a modality a row
    does not observe is an all-NaN block. Rows sharing a ``client_ids`` value
    form one client, and every row of a client must observe the same
    modalities. Without ``client_ids`` each distinct observation pattern is
    its own client.
    """

    def __init__(self, n_modalities=3, method="graphpl", latent_dim=16, hidden_dim=64, n_blocks=2, groups=4,
                 lambda_=1.0, beta=1.0, learning_rate=1e-3, batch_size=64, local_steps=50, global_rounds=20,
                 workers=1, random_state=0):
        self.n_modalities = n_modalities
        self.method = method
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.n_blocks = n_blocks
        self.groups = groups
        self.lambda_ = lambda_
        self.beta = beta
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.local_steps = local_steps
        self.global_rounds = global_rounds
        self.workers = workers
        self.random_state = random_state

    def _validate(self, X, reset):
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
        if reset:
            if self.method not in METHODS:
                raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
            if self.n_modalities < 2 or X.shape[1] % self.n_modalities:
                raise ValueError(f"{X.shape[1]} features do not split into {self.n_modalities} equal blocks")
            self.n_features_in_ = X.shape[1]
            self.block_dim_ = X.shape[1] // self.n_modalities
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X, self._observed_mask(X)

    def _observed_mask(self, X):
        blocks = np.isnan(X).reshape(len(X), self.n_modalities, self.block_dim_)
        missing = blocks.all(-1)
        if np.any(blocks.any(-1) & ~missing):
            raise ValueError("a modality block is partially NaN; blocks must be all-NaN or all-finite")
        if np.any(missing.all(1)):
            raise ValueError("a row observes no modality")
        return ~missing

    def _block(self, X, m):
        return X[:, m * self.block_dim_:(m + 1) * self.block_dim_]

    def fit(self, X, y=None, client_ids=None):
        X, mask = self._validate(X, reset=True)
        if client_ids is None:
            _, client_ids = np.unique(mask, axis=0, return_inverse=True)
        client_ids = np.asarray(client_ids).reshape(-1)
        if len(client_ids) != len(X):
            raise ValueError("client_ids must have one entry per row")
        shards, observed = [], []
        for cid in np.unique(client_ids):
            rows = client_ids == cid
            pattern = mask[rows]
            if np.any(pattern != pattern[0]):
                raise ValueError(f"client {cid!r} mixes observation patterns")
            obs = frozenset(int(m) for m in np.flatnonzero(pattern[0]))
            Xc = X[rows]
            shards.append(MultiModalDataset(np.zeros(len(Xc), dtype=int),
                                            {m: self._block(Xc, m) for m in sorted(obs)}))
            observed.append(obs)
        if frozenset().union(*observed) != frozenset(range(self.n_modalities)):
            raise ValueError("every modality must be observed by at least one client")

        vae_cfg = VaeConfig(self.block_dim_, self.latent_dim, self.hidden_dim, self.beta)
        init_seed, client_seed = np.random.SeedSequence([self.random_state, 1]).generate_state(2)
        initial = init_global(vae_cfg, self.n_modalities, self.method, self.n_blocks, self.groups, int(init_seed))
        clients = make_clients(shards, observed, vae_cfg, self.n_modalities, self.method, self.n_blocks,
                               self.groups, int(client_seed))
        train = TrainConfig(self.lambda_, self.beta, self.learning_rate, self.batch_size, self.local_steps,
                            self.random_state)
        cfg = FederationConfig(self.global_rounds, self.local_steps, self.workers, train)
        self.model_, self.history_ = run_federation(clients, cfg, initial)
        self.bundle_ = global_bundle(self.model_, vae_cfg, self.n_modalities, self.method, self.n_blocks,
                                     self.groups)
        self.n_clients_ = len(clients)
        return self

    def _by_pattern(self, mask):
        patterns, inverse = np.unique(mask, axis=0, return_inverse=True)
        for k, pattern in enumerate(patterns):
            yield np.flatnonzero(inverse.reshape(-1) == k), pattern

    def transform(self, X):
        """Copy of ``X`` with every NaN block replaced by its imputation."""
        check_is_fitted(self, "model_")
        X, mask = self._validate(X, reset=False)
        out = X.copy()
        for rows, pattern in self._by_pattern(mask):
            missing = [int(m) for m in np.flatnonzero(~pattern)]
            if not missing:
                continue
            obs = {int(m): self._block(X[rows], m) for m in np.flatnonzero(pattern)}
            imputed = infer_impute(self.bundle_, obs, missing, self.random_state)
            for m, values in imputed.items():
                out[np.ix_(rows, range(m * self.block_dim_, (m + 1) * self.block_dim_))] = values
        return out

    def embed(self, X):
        """Latent features ``(n, n_modalities * latent_dim)``: encoder means or fused imputations."""
        check_is_fitted(self, "model_")
        X, mask = self._validate(X, reset=False)
        out = np.empty((len(X), self.n_modalities * self.latent_dim))
        for rows, pattern in self._by_pattern(mask):
            obs = {int(m): self._block(X[rows], m) for m in np.flatnonzero(pattern)}
            out[rows] = infer_features(self.bundle_, obs, [int(m) for m in np.flatnonzero(~pattern)],
                                       self.random_state)
        return out
