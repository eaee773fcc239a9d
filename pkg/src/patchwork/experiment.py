"""End-to-end experiment: data -> patchwork -> federation -> evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import DropPolicy, MultiModalDataset, SyntheticSpec, generate, prototypes, split_heterogeneous, \
    train_test_split
from .errors import ConfigurationError
from .evaluation import (ClientSplit, CollapseResult, OracleClassifier, RQResult, SweepResult,
                         collapse_diagnostic, leave_one_out_gq, representation_quality, robustness_sweep)
from .federation import (ClientState, FederationConfig, GlobalModel, build_patchwork, global_bundle,
                         init_global, make_clients, run_federation)
from .training import METHODS, ModelBundle, TrainConfig, build_bundle
from .vae import VaeConfig

log = logging.getLogger(__name__)


@dataclass
class DataConfig:
    n_modalities: int = 3
    n_classes: int = 10
    dim: int = 32
    sigma: float = 0.3
    samples_per_client: int = 300
    classes_per_client: int = 6
    n_test: int = 500


@dataclass
class PatchworkConfig:
    n_clients: int = 5
    mode: str = "exact"
    drop_k: int = 1
    drop_p: float = 0.0


@dataclass
class TrainSection:
    lambda_: float = 1.0
    beta: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    local_steps_per_round: int = 50
    global_rounds: int = 20


@dataclass
class FusionConfig:
    latent_dim: int = 16
    hidden_dim: int = 64
    n_blocks: int = 2
    groups: int = 4


@dataclass
class EvalConfig:
    gq: bool = True
    rq: bool = True
    sweep: bool = True
    collapse: bool = True
    eval_every: int = 0
    sweep_missing: int = -1
    s_grid: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class RunConfig:
    method: str = "graphpl"
    seed: int = 0
    out: str = "runs/default"
    workers: int = 1


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    patchwork: PatchworkConfig = field(default_factory=PatchworkConfig)
    train: TrainSection = field(default_factory=TrainSection)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "ExperimentConfig":
        """Re-check every cross-module constraint; raises ConfigurationError naming the key."""
        d, p, t, f, e, r = self.data, self.patchwork, self.train, self.fusion, self.eval, self.run
        checks = [
            (d.n_modalities >= 2, "data.n_modalities must be >= 2"),
            (d.n_classes >= 2, "data.n_classes must be >= 2"),
            (d.dim >= 1, "data.dim must be >= 1"),
            (d.sigma >= 0, "data.sigma must be >= 0"),
            (d.samples_per_client >= 1, "data.samples_per_client must be >= 1"),
            (1 <= d.classes_per_client <= d.n_classes, "data.classes_per_client must be in [1, n_classes]"),
            (p.n_clients * d.classes_per_client >= d.n_classes,
             "data.classes_per_client too small to cover every class"),
            (d.n_test >= 1, "data.n_test must be >= 1"),
            (p.n_clients >= 1, "patchwork.n_clients must be >= 1"),
            (p.mode in ("exact", "probabilistic"), "patchwork.mode must be exact or probabilistic"),
            (0 <= p.drop_k < d.n_modalities, "patchwork.drop_k must be in [0, n_modalities)"),
            (0 <= p.drop_p < 1, "patchwork.drop_p must be in [0, 1)"),
            (t.lambda_ >= 0, "train.lambda must be >= 0"),
            (t.beta >= 0, "train.beta must be >= 0"),
            (t.learning_rate > 0, "train.learning_rate must be > 0"),
            (t.batch_size >= 1, "train.batch_size must be >= 1"),
            (t.local_steps_per_round >= 1, "train.local_steps_per_round must be >= 1"),
            (t.global_rounds >= 1, "train.global_rounds must be >= 1"),
            (f.latent_dim >= 1, "fusion.latent_dim must be >= 1"),
            (f.hidden_dim >= 1, "fusion.hidden_dim must be >= 1"),
            (f.n_blocks >= 1, "fusion.n_blocks must be >= 1"),
            (f.groups >= 1 and f.latent_dim % f.groups == 0, "groups must divide latent_dim"),
            (e.eval_every >= 0, "eval.eval_every must be >= 0"),
            (-d.n_modalities <= e.sweep_missing < d.n_modalities, "eval.sweep_missing out of range"),
            (0.0 in e.s_grid and all(0 <= s <= 1 for s in e.s_grid), "eval.s_grid must include 0 and lie in [0, 1]"),
            (r.method in METHODS, f"run.method must be one of {', '.join(METHODS)}"),
            (r.workers >= 1, "run.workers must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigurationError(msg)
        return self

    def vae_config(self) -> VaeConfig:
        return VaeConfig(self.data.dim, self.fusion.latent_dim, self.fusion.hidden_dim, self.train.beta)

    def federation_config(self) -> FederationConfig:
        t = self.train
        return FederationConfig(t.global_rounds, t.local_steps_per_round, self.run.workers,
                                TrainConfig(t.lambda_, t.beta, t.learning_rate, t.batch_size,
                                            t.local_steps_per_round, self.run.seed))


@dataclass
class Setup:
    """Everything fixed by the seed before training starts."""
    spec: SyntheticSpec
    oracle: OracleClassifier
    observed: list[frozenset[int]]
    splits: list[ClientSplit]
    test: MultiModalDataset


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    model: GlobalModel
    rows: list[dict]
    gq: dict[int, float] = field(default_factory=dict)
    rq: RQResult | None = None
    rq_untrained: RQResult | None = None
    sweep: SweepResult | None = None
    collapse: CollapseResult | None = None

    @property
    def gq_mean(self) -> float:
        return float(np.mean(list(self.gq.values()))) if self.gq else float("nan")


def build_setup(cfg: ExperimentConfig) -> Setup:
    """Data, patchwork and splits; depends on the seed only, never on the method."""
    d, p = cfg.data, cfg.patchwork
    ss = np.random.SeedSequence(cfg.run.seed).spawn(5)
    spec = SyntheticSpec(d.n_modalities, d.n_classes, d.dim, d.sigma, cfg.run.seed)
    pool = generate(spec, d.samples_per_client * p.n_clients, np.random.default_rng(ss[0]))
    shards = split_heterogeneous(pool, p.n_clients, d.classes_per_client, np.random.default_rng(ss[1]),
                                 d.n_classes)
    policy = DropPolicy(p.mode, p.drop_p, p.drop_k)
    observed = build_patchwork(p.n_clients, d.n_modalities, policy, np.random.default_rng(ss[2]))
    split_rng = np.random.default_rng(ss[3])
    splits = []
    for i, (idx, obs) in enumerate(zip(shards, observed)):
        tr, te = train_test_split(len(idx), split_rng)
        splits.append(ClientSplit(i, obs, pool.subset(idx[tr]), pool.subset(idx[te])))
    test = generate(spec, d.n_test, np.random.default_rng(ss[4]))
    return Setup(spec, OracleClassifier(prototypes(spec)), observed, splits, test)


def _bundle(cfg: ExperimentConfig, model: GlobalModel) -> ModelBundle:
    return global_bundle(model, cfg.vae_config(), cfg.data.n_modalities, cfg.run.method,
                         cfg.fusion.n_blocks, cfg.fusion.groups)


def evaluate(cfg: ExperimentConfig, setup: Setup, model: GlobalModel, result: ExperimentResult) -> None:
    bundle = _bundle(cfg, model)
    e, seed = cfg.eval, cfg.run.seed
    if e.gq:
        result.gq = leave_one_out_gq(bundle, setup.test, setup.oracle, seed)
    if e.rq:
        bundles = {s.client_id: bundle for s in setup.splits}
        result.rq = representation_quality(bundles, setup.splits, cfg.data.n_classes, seed)
    missing = e.sweep_missing % cfg.data.n_modalities
    if e.sweep:
        result.sweep = robustness_sweep(bundle, setup.test, missing, setup.oracle, e.s_grid, seed)
    if e.collapse:
        result.collapse = collapse_diagnostic(bundle, setup.test, missing, setup.oracle, seed)


def run_experiment(cfg: ExperimentConfig, setup: Setup | None = None,
                   initial: GlobalModel | None = None) -> ExperimentResult:
    cfg.validate()
    setup = setup or build_setup(cfg)
    vae_cfg = cfg.vae_config()
    M, f = cfg.data.n_modalities, cfg.fusion
    init_seed, client_seed = np.random.SeedSequence([cfg.run.seed, 1]).generate_state(2)
    initial = initial or init_global(vae_cfg, M, cfg.run.method, f.n_blocks, f.groups, int(init_seed))
    clients = make_clients([s.train for s in setup.splits], setup.observed, vae_cfg, M, cfg.run.method,
                           f.n_blocks, f.groups, int(client_seed))

    def hook(r, model, clients_):
        if not cfg.eval.eval_every or r % cfg.eval.eval_every:
            return None
        bundle = _bundle(cfg, model)
        gq = float(np.mean(list(leave_one_out_gq(bundle, setup.test, setup.oracle, cfg.run.seed).values())))
        rq = representation_quality({s.client_id: bundle for s in setup.splits}, setup.splits,
                                    cfg.data.n_classes, cfg.run.seed)
        return {c.client_id: {"gq": gq, "rq": rq.accuracies[c.client_id]} for c in clients_}

    model, rows = run_federation(clients, cfg.federation_config(), initial, hook)
    result = ExperimentResult(cfg, model, rows)
    evaluate(cfg, setup, model, result)
    if cfg.eval.rq:
        untrained = ExperimentResult(cfg, initial, [])
        bundle = _bundle(cfg, initial)
        untrained.rq = representation_quality({s.client_id: bundle for s in setup.splits}, setup.splits,
                                              cfg.data.n_classes, cfg.run.seed)
        result.rq_untrained = untrained.rq
    return result
