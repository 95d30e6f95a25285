"""Config-driven experiment runner and metric files."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .comms import TransferLedger, extra_cost_ratio
from .data import (ClientShard, Dataset, PartitionPlan, ProxyDataset, class_histogram, dirichlet_partition,
                   gen_synthetic, load_idx, sample_proxy)
from .errors import ConfigError
from .fed import (PROXY_STREAM, SUBSET_STREAM, FLConfig, RoundRecord, evaluate_global, evaluate_initial, evaluate_personalize,
                  initial_state, run_round)
from .nn import ModelSpec

DATA_DIR_ENV = "FEDCL_DATA_DIR"
CSV_HEADER = ["round", "initial_acc", "personalize_acc", "weight_divergence", "down_params", "up_params", "lr"]

# config-file key -> FLConfig field; the short keys follow the usual FL notation
FL_KEYS = {
    "K": "num_clients", "num_clients": "num_clients",
    "C": "client_fraction", "client_fraction": "client_fraction",
    "E": "local_epochs", "local_epochs": "local_epochs",
    "B": "batch_size", "batch_size": "batch_size",
    "lr": "lr", "lr_decay": "lr_decay",
    "lambda": "lam", "lam": "lam",
    "N": "interval", "interval": "interval",
    "strategy": "strategy", "alpha": "alpha",
    "proxy_fraction": "proxy_fraction", "proxy_disjoint": "proxy_disjoint",
    "mu": "prox_mu", "importance": "importance",
    "seed": "seed", "rounds": "rounds",
}
INT_FIELDS = {"num_clients", "local_epochs", "batch_size", "interval", "seed", "rounds"}
FLOAT_FIELDS = {"client_fraction", "lr", "lr_decay", "lam", "alpha", "proxy_fraction", "prox_mu"}
BOOL_FIELDS = {"proxy_disjoint"}


@dataclass(frozen=True)
class ExperimentConfig:
    fl: FLConfig = field(default_factory=FLConfig)
    dataset: str = "synthetic"
    n: int = 2000
    d: int = 784
    classes: int = 10
    noise: float = 0.1
    data_seed: int | None = None
    images: str | None = None
    labels: str | None = None
    hidden: tuple[int, ...] = (64,)
    dropout: float = 0.0
    personalize_every: int = 10
    eval_on: str = "local"
    targets: tuple[float, ...] = ()
    base_dir: str = "."

    @property
    def model(self) -> ModelSpec:
        return ModelSpec(self.d, self.hidden, self.classes, self.dropout)


@dataclass
class ExperimentSummary:
    strategy: str
    rounds: int
    param_count: int
    final_initial_acc: float
    final_personalize_acc: float
    rounds_to_target: dict[str, int | None]
    total_down: int
    total_up: int
    total_transfer: int
    extra_cost_ratio: str
    extra_cost_ratio_value: float


# -- config ------------------------------------------------------------------

def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _coerce(key: str, name: str, value):
    if name in INT_FIELDS:
        if not _is_int(value):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if name in FLOAT_FIELDS:
        if name == "alpha" and value in ("uniform", "inf", "Infinity"):
            return math.inf
        if name == "prox_mu" and value is None:
            return None
        if not (_is_int(value) or isinstance(value, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        if math.isnan(value) or (math.isinf(value) and name != "alpha"):
            raise ConfigError(key, f"value {value!r} out of range")
        return float(value)
    if name in BOOL_FIELDS:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def config_from_dict(raw: dict, base_dir: str | os.PathLike = ".") -> ExperimentConfig:
    """Validate a parsed config mapping; omitted keys take the defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    fl_kwargs, used = {}, {}
    exp = {}
    for key, value in raw.items():
        if key in FL_KEYS:
            name = FL_KEYS[key]
            if name in used:
                raise ConfigError(key, f"duplicates key {used[name]!r}")
            used[name] = key
            fl_kwargs[name] = _coerce(key, name, value)
            continue
        exp[key] = value
    try:
        fl = FLConfig(**fl_kwargs)
    except ConfigError as err:
        raise ConfigError(used.get(err.key, err.key), err.message) from None

    out = {}
    for key, value in exp.items():
        if key in ("n", "d", "classes", "personalize_every"):
            if not _is_int(value) or value < 1:
                raise ConfigError(key, f"expected a positive integer, got {value!r}")
        elif key == "data_seed":
            if value is not None and not _is_int(value):
                raise ConfigError(key, f"expected an integer, got {value!r}")
        elif key in ("noise", "dropout"):
            if not (_is_int(value) or isinstance(value, float)) or value < 0:
                raise ConfigError(key, f"expected a nonnegative number, got {value!r}")
            if key == "dropout" and value >= 1:
                raise ConfigError(key, f"value {value!r} out of range")
            value = float(value)
        elif key == "dataset":
            if value not in ("synthetic", "idx"):
                raise ConfigError(key, f"unknown dataset kind {value!r}, expected 'synthetic' or 'idx'")
        elif key in ("images", "labels"):
            if not isinstance(value, str):
                raise ConfigError(key, f"expected a path string, got {value!r}")
        elif key == "hidden":
            if not isinstance(value, list) or not all(_is_int(h) and h >= 1 for h in value):
                raise ConfigError(key, f"expected a list of positive integers, got {value!r}")
            value = tuple(value)
        elif key == "eval_on":
            if value not in ("local", "global"):
                raise ConfigError(key, f"unknown evaluation target {value!r}, expected 'local' or 'global'")
        elif key == "targets":
            if not isinstance(value, list) or not all(_is_int(v) or isinstance(v, float) for v in value):
                raise ConfigError(key, f"expected a list of accuracies, got {value!r}")
            value = tuple(float(v) for v in value)
        else:
            raise ConfigError(key, "unknown key")
        out[key] = value
    cfg = ExperimentConfig(fl=fl, base_dir=str(base_dir), **out)
    if cfg.dataset == "idx" and not (cfg.images and cfg.labels):
        raise ConfigError("images" if not cfg.images else "labels", "required when dataset is 'idx'")
    return cfg


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError("<file>", f"cannot read {path}: {err.strerror}") from None
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as err:
        raise ConfigError("<file>", f"{path} is not valid JSON: {err}") from None
    return config_from_dict(raw, path.parent)


# -- data wiring -------------------------------------------------------------

def _resolve(cfg: ExperimentConfig, p: str) -> Path:
    path = Path(p)
    if path.is_absolute():
        return path
    return Path(os.environ.get(DATA_DIR_ENV) or cfg.base_dir) / path


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    seed = cfg.fl.seed if cfg.data_seed is None else cfg.data_seed
    if cfg.dataset == "idx":
        data = load_idx(_resolve(cfg, cfg.images), _resolve(cfg, cfg.labels), cfg.classes)
        if data.d != cfg.d:
            raise ConfigError("d", f"dataset has {data.d} features but config says {cfg.d}")
        if cfg.n >= data.n:
            return data
        # IDX files are often sorted by label, so take a seeded random subset
        keep = np.random.default_rng([seed, SUBSET_STREAM]).choice(data.n, size=cfg.n, replace=False)
        return data.subset(np.sort(keep))
    return gen_synthetic(cfg.n, cfg.d, cfg.classes, seed, cfg.noise)


def prepare(cfg: ExperimentConfig, data: Dataset | None = None
            ) -> tuple[PartitionPlan, list[ClientShard], ProxyDataset]:
    """Partition the data across clients and draw the server's proxy set.

    By default the proxy is sampled from the union of the clients' training
    splits; with ``proxy_disjoint`` it is drawn first and withheld from the
    clients.
    """
    fl = cfg.fl
    data = load_dataset(cfg) if data is None else data
    proxy_seed = [fl.seed, PROXY_STREAM]
    if fl.proxy_disjoint:
        proxy = sample_proxy(data, fl.proxy_fraction, proxy_seed)
        rest = np.setdiff1d(np.arange(data.n), proxy.indices)
        plan, shards = dirichlet_partition(data.subset(rest), fl.num_clients, fl.alpha, fl.seed)
        return plan, shards, proxy
    plan, shards = dirichlet_partition(data, fl.num_clients, fl.alpha, fl.seed)
    pool = np.sort(np.concatenate([s.train_indices for s in shards]))
    drawn = sample_proxy(data.subset(pool), fl.proxy_fraction, proxy_seed)
    return plan, shards, ProxyDataset(drawn.data, drawn.fraction, pool[drawn.indices])


# -- running -----------------------------------------------------------------

def rounds_to_target(records: list[RoundRecord], target: float) -> int | None:
    for r in records:
        if r.initial_acc >= target:
            return r.t
    return None


def run_experiment(cfg: ExperimentConfig, on_record: Callable[[RoundRecord], None] | None = None,
                   data: Dataset | None = None) -> tuple[list[RoundRecord], ExperimentSummary]:
    """Run ``cfg.fl.rounds`` rounds and summarize.

    Record ``t`` describes the global model at the start of round ``t``. The
    summary adds one more evaluation of the model left after the last round;
    rounds-to-target counts that final model as round ``rounds``.
    """
    fl, spec = cfg.fl, cfg.model
    _, shards, proxy = prepare(cfg, data)
    state = initial_state(spec, fl)
    ledger = TransferLedger(spec.num_params)
    records = []
    for t in range(fl.rounds):
        personalize = t % cfg.personalize_every == 0
        state, rec = run_round(spec, state, shards, proxy, fl, ledger, personalize=personalize,
                               eval_on=cfg.eval_on)
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    evaluate = evaluate_global if cfg.eval_on == "global" else evaluate_initial
    final_initial = evaluate(spec, state.params, shards)
    final_pers = evaluate_personalize(spec, state.params, state.omega if fl.strategy == "fedcl" else None,
                                      shards, fl, fl.rounds)
    final = RoundRecord(fl.rounds, final_initial, final_pers, 0.0, 0, 0, fl.round_lr(fl.rounds))
    reached = {repr(target): rounds_to_target(records + [final], target) for target in cfg.targets}
    if len(ledger):
        ratio = extra_cost_ratio(ledger, ledger.baseline())
    else:
        ratio = 1
    summary = ExperimentSummary(
        strategy=fl.strategy, rounds=fl.rounds, param_count=spec.num_params,
        final_initial_acc=final_initial, final_personalize_acc=final_pers,
        rounds_to_target=reached, total_down=ledger.total_down, total_up=ledger.total_up,
        total_transfer=ledger.total(), extra_cost_ratio=str(ratio), extra_cost_ratio_value=float(ratio),
    )
    return records, summary


def partition_report(cfg: ExperimentConfig) -> list[dict]:
    plan, shards, proxy = prepare(cfg)
    rows = []
    for s in shards:
        hist = class_histogram(s.train) + class_histogram(s.test)
        rows.append({"client": s.client_id, "train": s.train.n, "test": s.test.n,
                     **{f"class_{c}": int(v) for c, v in enumerate(hist)}})
    return rows


# -- metric files ------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def record_row(r: RoundRecord) -> list[str]:
    return [_fmt(v) for v in (r.t, r.initial_acc, r.personalize_acc, r.weight_divergence,
                              r.down_params, r.up_params, r.lr)]


class MetricsWriter:
    """Streams records to ``metrics.csv`` so a crash still leaves the finished rounds."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.path = self.out_dir / "metrics.csv"
        self._fh = open(self.path, "w", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(CSV_HEADER)

    def write(self, record: RoundRecord) -> None:
        self._csv.writerow(record_row(record))
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_summary(summary: ExperimentSummary, out_dir) -> Path:
    path = Path(out_dir) / "summary.json"
    path.write_text(json.dumps(asdict(summary), indent=2, sort_keys=True) + "\n")
    return path


def emit_metrics(records: list[RoundRecord], summary: ExperimentSummary, out_dir) -> tuple[Path, Path]:
    with MetricsWriter(out_dir) as w:
        for r in records:
            w.write(r)
    return w.path, write_summary(summary, out_dir)


def read_metrics(path) -> list[RoundRecord]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        out = []
        for row in reader:
            t, init, pers, div, down, up, lr = row
            out.append(RoundRecord(int(t), float(init), float(pers) if pers else None, float(div),
                                   int(down), int(up), float(lr)))
        return out
