"""Round-based federation of the shared branch.

Each round the server broadcasts ``omega_c``, every client runs local SGD
anchored at it, and the server replaces ``omega_c`` with the (optionally
sample-weighted) mean of the clients' shared parameters. Only parameter
buffers and scalar summaries cross the client boundary.
"""

from __future__ import annotations

import enum
import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .datagen import ClientDataset, stream
from .model import (
    GROUPS,
    SHARED_BRANCH,
    SHARED_WITH_ENCODER,
    DisentangleModel,
    LossBreakdown,
    ModelHyperParams,
    OptimizerConfig,
    flatten_model_grads,
    init_model,
    local_objective,
    train_local_epoch,
)

_TAG_TRAIN = 61


class AggregationMode(str, enum.Enum):
    UNIFORM = "uniform"
    SAMPLE_WEIGHTED = "sample_weighted"


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 50
    local_epochs: int = 1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    aggregation: AggregationMode = AggregationMode.SAMPLE_WEIGHTED
    aggregate_encoder: bool = False
    model: ModelHyperParams = field(default_factory=ModelHyperParams)
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "aggregation", AggregationMode(self.aggregation))
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def shared_groups(self) -> tuple[str, ...]:
        return SHARED_WITH_ENCODER if self.aggregate_encoder else SHARED_BRANCH


@dataclass
class ServerState:
    omega_c: np.ndarray
    round: int = 0
    aggregation: AggregationMode = AggregationMode.SAMPLE_WEIGHTED


@dataclass
class ClientState:
    client_id: int
    model: DisentangleModel
    train: ClientDataset
    rng: np.random.Generator

    @property
    def n_samples(self) -> int:
        return self.train.n


@dataclass
class ClientRoundRecord:
    """What one client reports for one round: scalars and parameter-shaped buffers only."""

    client_id: int
    loss: LossBreakdown
    grad_shared: np.ndarray
    grad_private: np.ndarray
    params: np.ndarray

    @property
    def grad_norm_shared(self) -> float:
        return float(np.linalg.norm(self.grad_shared))

    @property
    def grad_norm_private(self) -> float:
        return float(np.linalg.norm(self.grad_private))


@dataclass
class RoundReport:
    round: int
    clients: list[ClientRoundRecord]
    omega_checksum: str


@dataclass
class TrainingTrace:
    rounds: list[RoundReport] = field(default_factory=list)
    eta: float = 0.0

    def __len__(self) -> int:
        return len(self.rounds)

    @property
    def client_ids(self) -> list[int]:
        return [c.client_id for c in self.rounds[0].clients] if self.rounds else []

    def client_records(self, client_id: int) -> list[ClientRoundRecord]:
        out = []
        for r in self.rounds:
            rec = [c for c in r.clients if c.client_id == client_id]
            if not rec:
                raise KeyError(f"unknown client {client_id}")
            out.append(rec[0])
        return out

    def csv_rows(self) -> list[dict]:
        rows = []
        for r in self.rounds:
            for c in r.clients:
                rows.append(
                    {
                        "round": r.round,
                        "client": c.client_id,
                        "loss_total": c.loss.total,
                        "loss_outcome": c.loss.outcome,
                        "loss_kl": c.loss.encoder_kl,
                        "loss_prox": c.loss.proximal,
                        "grad_norm_shared": c.grad_norm_shared,
                        "grad_norm_private": c.grad_norm_private,
                    }
                )
        return rows


TRACE_COLUMNS = (
    "round",
    "client",
    "loss_total",
    "loss_outcome",
    "loss_kl",
    "loss_prox",
    "grad_norm_shared",
    "grad_norm_private",
)


def checksum(vector: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(vector, dtype=np.float64).tobytes()).hexdigest()[:16]


def aggregate_shared(
    params: Sequence[np.ndarray],
    counts: Sequence[int],
    mode: AggregationMode = AggregationMode.SAMPLE_WEIGHTED,
) -> np.ndarray:
    """Average flattened shared parameters; callers pass them sorted by client id."""
    if len(params) == 0:
        raise ValueError("nothing to aggregate")
    if len(counts) != len(params):
        raise ValueError(f"{len(params)} parameter vectors but {len(counts)} sample counts")
    shape = np.shape(params[0])
    for i, p in enumerate(params):
        if np.shape(p) != shape:
            raise ValueError(f"client {i}: parameter shape {np.shape(p)} != {shape}")
    if any(c <= 0 for c in counts):
        raise ValueError("sample counts must be positive")
    mode = AggregationMode(mode)
    stacked = np.stack([np.asarray(p, dtype=np.float64) for p in params])
    if mode is AggregationMode.UNIFORM:
        weights = np.full(len(params), 1.0 / len(params))
    else:
        c = np.asarray(counts, dtype=np.float64)
        weights = c / c.sum()
    # average the offsets from the first buffer: identical inputs come back bit-exact
    base = stacked[0]
    return base + weights @ (stacked - base)


def broadcast_shared(
    server: ServerState, clients: Sequence[ClientState], groups: Sequence[str] = SHARED_BRANCH
) -> list[ClientState]:
    for c in clients:
        c.model.set_flat(server.omega_c.copy(), groups)
    return list(clients)


def _evaluate(client: ClientState, omega_c: np.ndarray, cfg: FederationConfig) -> ClientRoundRecord:
    """Full-batch, mean-mode objective and gradient at the client's current parameters."""
    opt = cfg.optimizer
    loss, grads = local_objective(
        client.model,
        client.train,
        omega_c,
        opt.lam_kl,
        opt.lam_prox,
        noise=None,
        shared_groups=cfg.shared_groups,
        lam_ref=opt.lam_ref,
        literal_sign=opt.literal_sign,
        lam_outcome=opt.lam_outcome,
    )
    shared = cfg.shared_groups
    private = tuple(g for g in GROUPS if g not in shared)
    return ClientRoundRecord(
        client.client_id,
        loss,
        flatten_model_grads(grads, shared),
        flatten_model_grads(grads, private),
        client.model.flat(shared + private),
    )


def _local_phase(client: ClientState, omega_c: np.ndarray, cfg: FederationConfig) -> ClientRoundRecord:
    for _ in range(cfg.local_epochs):
        train_local_epoch(client.model, client.train, omega_c, cfg.optimizer, client.rng, cfg.shared_groups)
    return _evaluate(client, omega_c, cfg)


def _run_clients(clients, omega_c, cfg: FederationConfig) -> list[ClientRoundRecord]:
    if cfg.workers == 1 or len(clients) == 1:
        return [_local_phase(c, omega_c, cfg) for c in clients]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        futures = [pool.submit(_local_phase, c, omega_c, cfg) for c in clients]
        return [f.result() for f in futures]


def run_round(
    server: ServerState, clients: Sequence[ClientState], cfg: FederationConfig
) -> tuple[ServerState, list[ClientState], RoundReport]:
    groups = cfg.shared_groups
    broadcast_shared(server, clients, groups)
    anchor = server.omega_c.copy()
    anchor.setflags(write=False)
    records = _run_clients(clients, anchor, cfg)
    ordered = sorted(zip(clients, records), key=lambda cr: cr[0].client_id)
    omega = aggregate_shared(
        [c.model.flat(groups) for c, _ in ordered],
        [c.n_samples for c, _ in ordered],
        server.aggregation,
    )
    new_server = replace(server, omega_c=omega, round=server.round + 1)
    report = RoundReport(new_server.round, [r for _, r in ordered], checksum(omega))
    return new_server, list(clients), report


def init_clients(datasets: Sequence[ClientDataset], cfg: FederationConfig) -> list[ClientState]:
    """Client states with a common model seed, so shared groups start identical."""
    clients = []
    for ds in sorted(datasets, key=lambda d: d.client_id):
        model = init_model(ds.x_shared.shape[1], ds.x_private.shape[1], cfg.model, cfg.seed)
        clients.append(ClientState(ds.client_id, model, ds, stream(cfg.seed, _TAG_TRAIN, ds.client_id)))
    return clients


def run_training(
    cfg: FederationConfig, datasets: Sequence[ClientDataset]
) -> tuple[ServerState, list[ClientState], TrainingTrace]:
    if not datasets:
        raise ValueError("at least one client dataset is required")
    clients = init_clients(datasets, cfg)
    groups = cfg.shared_groups
    server = ServerState(
        aggregate_shared(
            [c.model.flat(groups) for c in clients], [c.n_samples for c in clients], cfg.aggregation
        ),
        0,
        cfg.aggregation,
    )
    trace = TrainingTrace(eta=cfg.optimizer.eta)
    for _ in range(cfg.rounds):
        server, clients, report = run_round(server, clients, cfg)
        trace.rounds.append(report)
    return server, clients, trace


def local_only_baseline(
    cfg: FederationConfig, datasets: Sequence[ClientDataset]
) -> tuple[list[ClientState], TrainingTrace]:
    """Same pipeline without broadcast or aggregation, and with the proximal weight at 0."""
    if not datasets:
        raise ValueError("at least one client dataset is required")
    cfg = replace(cfg, optimizer=replace(cfg.optimizer, lam_prox=0.0))
    clients = init_clients(datasets, cfg)
    groups = cfg.shared_groups
    trace = TrainingTrace(eta=cfg.optimizer.eta)
    for t in range(cfg.rounds):
        # each client anchors on its own shared params; with lam_prox = 0 the anchor is inert
        anchors = [c.model.flat(groups) for c in clients]
        if cfg.workers == 1 or len(clients) == 1:
            records = [_local_phase(c, a, cfg) for c, a in zip(clients, anchors)]
        else:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                futures = [pool.submit(_local_phase, c, a, cfg) for c, a in zip(clients, anchors)]
                records = [f.result() for f in futures]
        checks = checksum(np.concatenate([c.model.flat(groups) for c in clients]))
        trace.rounds.append(RoundReport(t + 1, records, checks))
    return clients, trace
