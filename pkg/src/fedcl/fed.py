"""Federated rounds: importance estimation, penalized local training, aggregation.

Three strategies share one code path and differ only in the quadratic anchor
penalty ``coef * sum(omega * (theta - theta_global)**2)`` added to each
client's loss:

* ``fedavg``  -- no penalty.
* ``fedprox`` -- omega is all ones, coef = mu / 2.
* ``fedcl``   -- omega is estimated on the server's proxy set every
  ``interval`` rounds and shipped to the selected clients, coef = lam.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

from .comms import TransferLedger
from .data import ClientShard, Dataset, ProxyDataset, round_half_up
from .errors import ConfigError, DomainError
from .nn import (Batch, ModelSpec, ParamVector, accuracy, init_params, loss_and_grad, per_example_grads,
                 sgd_step)

STRATEGIES = ("fedavg", "fedprox", "fedcl")
IMPORTANCE_METHODS = ("squared", "abs", "norm", "ones")

# stream tags for np.random.SeedSequence entropy, keeps every consumer independent
SAMPLE_STREAM, TRAIN_STREAM, PERSONALIZE_STREAM, INIT_STREAM, PROXY_STREAM, SUBSET_STREAM = range(6)


@dataclass(frozen=True)
class FLConfig:
    num_clients: int = 10
    client_fraction: float = 0.2
    local_epochs: int = 2
    batch_size: int = 64
    lr: float = 0.005
    lr_decay: float = 0.99
    lam: float = 0.5
    interval: int = 1
    strategy: str = "fedcl"
    alpha: float = 1.0
    proxy_fraction: float = 0.01
    proxy_disjoint: bool = False
    prox_mu: float | None = None  # None means 2 * lam
    importance: str = "squared"
    seed: int = 0
    rounds: int = 30

    def __post_init__(self):
        checks = {
            "num_clients": self.num_clients >= 1,
            "client_fraction": 0.0 < self.client_fraction <= 1.0,
            "local_epochs": self.local_epochs >= 0,
            "batch_size": self.batch_size >= 1,
            "lr": self.lr > 0.0,
            "lr_decay": 0.0 < self.lr_decay <= 1.0,
            "lam": self.lam >= 0.0,
            "interval": self.interval >= 1,
            "strategy": self.strategy in STRATEGIES,
            "alpha": self.alpha > 0.0,
            "proxy_fraction": 0.0 < self.proxy_fraction <= 1.0,
            "prox_mu": self.prox_mu is None or self.prox_mu >= 0.0,
            "importance": self.importance in IMPORTANCE_METHODS,
            "rounds": self.rounds >= 0,
        }
        for name, ok in checks.items():
            if not ok:
                value = getattr(self, name)
                if name == "strategy":
                    raise ConfigError(name, f"unknown strategy {value!r}, expected one of {STRATEGIES}")
                if name == "importance":
                    raise ConfigError(name, f"unknown method {value!r}, expected one of {IMPORTANCE_METHODS}")
                raise ConfigError(name, f"value {value!r} out of range")

    @property
    def num_selected(self) -> int:
        return num_selected(self.num_clients, self.client_fraction)

    @property
    def mu(self) -> float:
        return 2.0 * self.lam if self.prox_mu is None else self.prox_mu

    @property
    def penalty_coef(self) -> float:
        if self.strategy == "fedavg":
            return 0.0
        if self.strategy == "fedprox":
            return self.mu / 2.0
        return self.lam

    def round_lr(self, t: int) -> float:
        return self.lr * self.lr_decay ** t

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class ImportanceWeights:
    values: ParamVector
    estimated_at: int | None = None

    @classmethod
    def identity(cls, like: ParamVector) -> ImportanceWeights:
        return cls(like.with_values(np.ones(len(like))), None)

    @property
    def is_identity(self) -> bool:
        return self.estimated_at is None


@dataclass(frozen=True)
class RoundState:
    t: int
    params: ParamVector
    selected: tuple[int, ...] = ()
    m: int = 0
    omega: ImportanceWeights | None = None  # latest server estimate
    client_omega: dict[int, ImportanceWeights] = field(default_factory=dict)


@dataclass
class RoundRecord:
    t: int
    initial_acc: float
    personalize_acc: float | None
    weight_divergence: float
    down_params: int
    up_params: int
    lr: float
    selected: tuple[int, ...] = field(default=(), compare=False)


def num_selected(num_clients: int, fraction: float) -> int:
    return max(round_half_up(fraction * num_clients), 1)


def stream_rng(seed: int, tag: int, *rest: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag, *rest])


# -- importance --------------------------------------------------------------

def estimate_importance(spec: ModelSpec, global_params: ParamVector, proxy: ProxyDataset | Dataset,
                        t: int | None = 0, method: str = "squared", chunk: int = 64) -> ImportanceWeights:
    """Per-parameter importance of the global model, averaged over the proxy set.

    ``squared`` (default) averages element-wise squared per-example gradients,
    i.e. the diagonal empirical Fisher. ``abs`` averages absolute gradients and
    ``norm`` spreads each example's gradient 2-norm over every coordinate.
    ``ones`` ignores the data and returns all ones. Dropout is off throughout.
    """
    data = proxy.data if isinstance(proxy, ProxyDataset) else proxy
    if data.n == 0:
        raise DomainError("importance needs a nonempty proxy set")
    if method not in IMPORTANCE_METHODS:
        raise DomainError(f"unknown importance method {method!r}")
    if method == "ones":
        return ImportanceWeights(global_params.with_values(np.ones(len(global_params))), t)
    acc = np.zeros(len(global_params))
    for start in range(0, data.n, chunk):
        batch = Batch(data.inputs[start:start + chunk], data.labels[start:start + chunk])
        g = per_example_grads(spec, global_params, batch)
        if method == "squared":
            acc += (g * g).sum(axis=0)
        elif method == "abs":
            acc += np.abs(g).sum(axis=0)
        else:
            acc += np.linalg.norm(g, axis=1).sum()
    return ImportanceWeights(global_params.with_values(acc / data.n), t)


# -- local training ----------------------------------------------------------

def penalty_value(params: ParamVector, anchor: ParamVector, omega: ImportanceWeights, coef: float) -> float:
    d = params.values - anchor.values
    return float(coef * np.sum(omega.values.values * d * d))


def penalty_grad(params: ParamVector, anchor: ParamVector, omega: ImportanceWeights, coef: float) -> ParamVector:
    params.check_congruent(anchor)
    params.check_congruent(omega.values)
    return params.with_values(2.0 * coef * omega.values.values * (params.values - anchor.values))


Objective = Callable[[ParamVector, Batch, bool, np.random.Generator], tuple[float, ParamVector]]


def local_update(spec: ModelSpec, global_params: ParamVector, omega: ImportanceWeights | None,
                 shard: ClientShard | Dataset, cfg: FLConfig, round_lr: float, rng: np.random.Generator,
                 *, coef: float | None = None, objective: Objective | None = None) -> ParamVector:
    """Run ``cfg.local_epochs`` epochs of mini-batch SGD on the penalized local loss.

    ``coef`` defaults to the strategy's penalty coefficient; ``omega=None``
    means the identity (all ones). ``objective`` replaces the model's
    cross-entropy, which the closed-form tests use.
    """
    train = shard.train if isinstance(shard, ClientShard) else shard
    if train.n == 0:
        raise DomainError("local training needs a nonempty train set")
    if omega is None:
        omega = ImportanceWeights.identity(global_params)
    global_params.check_congruent(omega.values)
    coef = cfg.penalty_coef if coef is None else coef
    if objective is None:
        def objective(p, b, training, r):
            return loss_and_grad(spec, p, b, training, r)

    params = global_params
    for _ in range(cfg.local_epochs):
        order = rng.permutation(train.n)
        for start in range(0, train.n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grad = objective(params, Batch(train.inputs[idx], train.labels[idx]), True, rng)
            if coef:
                grad = grad.with_values(grad.values + penalty_grad(params, global_params, omega, coef).values)
            params = sgd_step(params, grad, round_lr)
    return params


# -- server side -------------------------------------------------------------

def sample_clients(num_clients: int, fraction: float, t: int, seed: int) -> list[int]:
    if num_clients < 1:
        raise DomainError("need at least one client")
    m = num_selected(num_clients, fraction)
    rng = stream_rng(seed, SAMPLE_STREAM, t)
    return [int(k) for k in rng.choice(num_clients, size=m, replace=False)]


def aggregate(updates: list[tuple[ParamVector, int]]) -> ParamVector:
    """Mean of client parameters weighted by their train-set sizes.

    Updates are put in a canonical order first so the result does not depend
    on arrival order, and summed as offsets from the first so identical inputs
    come back exactly.
    """
    if not updates:
        raise DomainError("nothing to aggregate")
    first = updates[0][0]
    for p, size in updates:
        first.check_congruent(p)
        if size < 0:
            raise DomainError("negative client size")
    total = sum(size for _, size in updates)
    if total == 0:
        raise DomainError("all clients report zero examples")
    ordered = sorted(updates, key=lambda u: (u[1], u[0].values.tobytes()))
    base = ordered[0][0].values
    offset = np.zeros_like(base)
    for p, size in ordered:
        if size:
            offset += (size / total) * (p.values - base)
    # untouched coordinates keep their exact bits (including -0.0)
    return first.with_values(np.where(offset == 0.0, base, base + offset))


def weight_divergence(local_params: list[ParamVector], global_params: ParamVector) -> float:
    if not local_params:
        raise DomainError("no local models")
    norms = []
    for p in local_params:
        global_params.check_congruent(p)
        norms.append(float(np.linalg.norm(p.values - global_params.values)))
    return float(np.mean(norms))


def evaluate_initial(spec: ModelSpec, global_params: ParamVector, shards: list[ClientShard]) -> float:
    """Mean over clients of the global model's accuracy on each client's test split."""
    accs = []
    for s in shards:
        if s.test.n == 0:
            raise DomainError(f"client {s.client_id} has an empty test set")
        accs.append(accuracy(spec, global_params, s.test.as_batch()))
    return float(np.mean(accs))


def evaluate_global(spec: ModelSpec, global_params: ParamVector, shards: list[ClientShard]) -> float:
    """Accuracy on the pooled test splits of all clients."""
    pooled = Dataset.concat([s.test for s in shards], spec.output_dim, spec.input_dim)
    return accuracy(spec, global_params, pooled.as_batch())


def evaluate_personalize(spec: ModelSpec, global_params: ParamVector, omega: ImportanceWeights | None,
                         shards: list[ClientShard], cfg: FLConfig, t: int = 0) -> float:
    """Mean client test accuracy after one local training pass from the global model."""
    accs = []
    for s in shards:
        if s.test.n == 0:
            raise DomainError(f"client {s.client_id} has an empty test set")
        params = global_params
        if s.train.n:
            rng = stream_rng(cfg.seed, PERSONALIZE_STREAM, t, s.client_id)
            params = local_update(spec, global_params, omega, s, cfg, cfg.round_lr(t), rng)
        accs.append(accuracy(spec, params, s.test.as_batch()))
    return float(np.mean(accs))


def _omega_for(cfg: FLConfig, state: RoundState, client: int) -> ImportanceWeights | None:
    if cfg.strategy == "fedcl":
        return state.client_omega.get(client)
    return None  # identity; unused by fedavg since its coefficient is zero


def initial_state(spec: ModelSpec, cfg: FLConfig) -> RoundState:
    return RoundState(0, init_params(spec, stream_rng(cfg.seed, INIT_STREAM)))


def run_round(spec: ModelSpec, state: RoundState, shards: list[ClientShard], proxy: ProxyDataset | None,
              cfg: FLConfig, ledger: TransferLedger, *, personalize: bool = False,
              eval_on: str = "local") -> tuple[RoundState, RoundRecord]:
    """Advance the federation by one round.

    The record describes the global model that entered round ``t``: its
    accuracy before local training, the spread of the local models trained
    from it, and what the round cost on the wire.
    """
    t, theta = state.t, state.params
    initial = (evaluate_global if eval_on == "global" else evaluate_initial)(spec, theta, shards)

    distribute = cfg.strategy == "fedcl" and t % cfg.interval == 0
    omega, client_omega = state.omega, dict(state.client_omega)
    selected = sample_clients(cfg.num_clients, cfg.client_fraction, t, cfg.seed)
    if distribute:
        if proxy is None:
            raise DomainError("fedcl needs a proxy set")
        omega = estimate_importance(spec, theta, proxy, t, cfg.importance)
        for k in selected:
            client_omega[k] = omega
    state = replace(state, omega=omega, client_omega=client_omega)

    lr = cfg.round_lr(t)
    updates = []
    for k in selected:
        shard = shards[k]
        if shard.train.n == 0:
            updates.append((theta, 0))
            continue
        rng = stream_rng(cfg.seed, TRAIN_STREAM, t, k)
        updates.append((local_update(spec, theta, _omega_for(cfg, state, k), shard, cfg, lr, rng),
                        shard.train.n))
    divergence = weight_divergence([p for p, _ in updates], theta)
    new_theta = aggregate(updates) if any(size for _, size in updates) else theta
    ledger.record_round(t, len(selected), distribute)

    pers = None
    if personalize:
        pers = evaluate_personalize(spec, theta, omega if cfg.strategy == "fedcl" else None, shards, cfg, t)
    entry = ledger.entries[-1]
    record = RoundRecord(t, initial, pers, divergence, entry.down, entry.up, lr, tuple(selected))
    new_state = replace(state, t=t + 1, params=new_theta, selected=tuple(selected), m=len(selected))
    return new_state, record

