"""In-process federated simulation of Fisher-regularized training.

Each round the server broadcasts theta (and, on exchange rounds, collects
client FIMs and broadcasts the aggregate). Clients run preconditioned local
SGD and send back their summed raw gradients. The server averages them with
weights n_k / N and applies theta -= eta (I + lambda I_G) g once.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveFloat, PositiveInt

from .batchfire import initial_theta
from .errors import DataError, DimensionError
from .fisher import (
    BYTES_PER_VALUE,
    FisherConfig,
    FisherEstimate,
    aggregate_fims,
    apply_preconditioner,
    empirical_fim,
    from_payload,
    mix_fim,
    zero_fisher,
)
from .model import (
    Fragment,
    ModelSpec,
    Provenance,
    accuracy,
    check_fragment,
    loss_and_grad,
    split_batches,
)
from .numkernel import ParamVec, Rng, as_param_vec, at_step, ensure_finite
from .settings import worker_count

logger = logging.getLogger("FedSim")

MAX_PARTITION_RETRIES = 100
ROUND_COLUMNS = ["round", "val_acc", "global_loss", "bytes_up_total", "bytes_down_total"]
COMM_COLUMNS = ["round", "direction", "client_id", "payload_bytes"]


# ----------------------------------------------------
# CONFIG
# ----------------------------------------------------

class PartitionSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["iid", "dirichlet", "shard"] = "iid"
    beta: PositiveFloat = 0.5
    per_client: PositiveInt = 2


class FedConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    num_clients: PositiveInt = 10
    rounds: PositiveInt = 50
    local_epochs: NonNegativeInt = 1
    eta: PositiveFloat = 0.001
    penalty: float = Field(0.1, ge=0.0, alias="lambda")
    fim_exchange_period: PositiveInt = 5
    fim_exchange: bool = True
    fisher: FisherConfig = FisherConfig()
    partition: PartitionSpec = PartitionSpec()
    seed: int = 0
    server_side_val_fim: bool = False
    # None: one full-batch step per local epoch
    local_batch_size: Optional[PositiveInt] = None


def is_exchange_round(round_index: int, cfg: FedConfig) -> bool:
    return cfg.fim_exchange and round_index % cfg.fim_exchange_period == 0


# ----------------------------------------------------
# PARTITIONING
# ----------------------------------------------------

def _client_fragments(full: Fragment, buckets: Sequence[np.ndarray]) -> list[Fragment]:
    return [
        full.subset(np.sort(idx), f"{full.id}/client{k}", Provenance("client", k))
        for k, idx in enumerate(buckets)
    ]


def _dirichlet_buckets(labels: np.ndarray, num_clients: int, beta: float, rng: Rng) -> list[np.ndarray] | None:
    buckets = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        proportions = rng.dirichlet(np.full(num_clients, beta))
        cuts = (np.cumsum(proportions) * idx.size).astype(int)[:-1]
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].extend(part.tolist())
    if any(len(b) == 0 for b in buckets):
        return None
    return [np.asarray(b, dtype=np.int64) for b in buckets]


def partition_dataset(full: Fragment, cfg: FedConfig, rng: Rng) -> list[Fragment]:
    num_clients = cfg.num_clients
    part = cfg.partition
    if full.n < num_clients:
        raise DataError(f"cannot give {num_clients} clients a share of {full.n} examples")

    if part.kind == "iid":
        buckets = np.array_split(rng.permutation(full.n), num_clients)

    elif part.kind == "dirichlet":
        buckets = None
        for attempt in range(MAX_PARTITION_RETRIES):
            buckets = _dirichlet_buckets(full.labels, num_clients, part.beta, rng)
            if buckets is not None:
                break
            logger.warning(f"⚠️ Dirichlet draw {attempt} left a client empty, resampling")
        if buckets is None:
            raise DataError(
                f"no Dirichlet(beta={part.beta}) partition with {num_clients} non-empty clients "
                f"after {MAX_PARTITION_RETRIES} draws"
            )

    else:
        num_shards = num_clients * part.per_client
        if num_shards > full.n:
            raise DataError(f"{num_shards} shards requested from {full.n} examples")
        shards = np.array_split(np.argsort(full.labels, kind="stable"), num_shards)
        order = rng.permutation(num_shards)
        buckets = [
            np.concatenate([shards[s] for s in order[k * part.per_client:(k + 1) * part.per_client]])
            for k in range(num_clients)
        ]

    clients = _client_fragments(full, buckets)
    logger.info(f"✅ Partitioned {full.n} examples into {num_clients} clients ({part.kind})")
    return clients


# ----------------------------------------------------
# CLIENT
# ----------------------------------------------------

@dataclass
class ClientRecord:
    id: int
    data: Fragment
    theta_local: Optional[ParamVec] = None
    i_local: Optional[FisherEstimate] = None
    # validation FIM the client computed (or received) at the first round
    i_val: Optional[FisherEstimate] = None

    @property
    def n_k(self) -> int:
        return self.data.n


@dataclass(frozen=True)
class LocalUpdate:
    client_id: int
    delta_grad: ParamVec
    i_local: FisherEstimate
    bytes_up: int
    theta_local: ParamVec
    n_k: int
    i_val: FisherEstimate
    # serialized i_local, sent on exchange rounds only
    fim_wire: Optional[bytes] = None


def _local_batches(data: Fragment, batch_size: int | None) -> list[Fragment]:
    if batch_size is None or batch_size >= data.n:
        return [data]
    return split_batches(data, math.ceil(data.n / batch_size))


def client_local_update(
    spec: ModelSpec,
    client: ClientRecord,
    theta_global: ParamVec,
    i_global: FisherEstimate,
    cfg: FedConfig,
    val: Fragment,
    round_index: int = 0,
    i_val: FisherEstimate | None = None,
) -> LocalUpdate:
    """E epochs of preconditioned local SGD starting from theta_global.

    `delta_grad` is the sum of the raw gradients taken along the way; the
    server applies the preconditioner once. The local FIM mixes the client's
    data with the validation FIM, both at theta_global.
    """
    if theta_global.shape != (spec.param_count,) or i_global.dim != spec.param_count:
        raise DimensionError(f"client {client.id}: parameter or FIM dimension mismatch")
    check_fragment(spec, client.data)
    fcfg = cfg.fisher

    if i_val is None:
        i_val = client.i_val
    if i_val is None:
        i_val = empirical_fim(spec, theta_global, val, fcfg)

    theta = theta_global
    delta = np.zeros(spec.param_count)
    step = 0
    for _ in range(cfg.local_epochs):
        for batch in _local_batches(client.data, cfg.local_batch_size):
            with at_step(step):
                _, grad = loss_and_grad(spec, theta, batch)
                delta = delta + grad
                theta = theta - cfg.eta * apply_preconditioner(i_global, grad, cfg.penalty)
                ensure_finite(theta, f"client {client.id} parameters", step=step)
            step += 1

    i_local = mix_fim(empirical_fim(spec, theta_global, client.data, fcfg), i_val, fcfg.mix_mu)
    bytes_up = BYTES_PER_VALUE * spec.param_count
    fim_wire = None
    if is_exchange_round(round_index, cfg):
        fim_wire = i_local.to_payload()
        bytes_up += len(fim_wire)

    return LocalUpdate(
        client_id=client.id,
        delta_grad=as_param_vec(delta, copy=False),
        i_local=i_local,
        bytes_up=bytes_up,
        theta_local=as_param_vec(theta),
        n_k=client.n_k,
        i_val=i_val,
        fim_wire=fim_wire,
    )


# ----------------------------------------------------
# SERVER
# ----------------------------------------------------

@dataclass(frozen=True)
class CommRecord:
    round: int
    direction: Literal["up", "down"]
    client_id: int
    payload_bytes: int


@dataclass(frozen=True)
class ServerState:
    theta_global: ParamVec
    i_global: FisherEstimate
    round: int = 0
    comm_log: tuple[CommRecord, ...] = ()
    # set when the server computes and broadcasts the validation FIM itself
    i_val: Optional[FisherEstimate] = None
    last_updates: tuple[LocalUpdate, ...] = field(default=(), repr=False)


def init_server(
    spec: ModelSpec, cfg: FedConfig, val: Fragment, theta0: ParamVec | None = None
) -> ServerState:
    theta = initial_theta(spec, cfg.seed) if theta0 is None else as_param_vec(theta0)
    fcfg = cfg.fisher
    i_val = empirical_fim(spec, theta, val, fcfg) if cfg.server_side_val_fim else None
    return ServerState(
        theta_global=theta,
        i_global=zero_fisher(fcfg.variant_kind, spec.param_count, fcfg.rank_k),
        i_val=i_val,
    )


def aggregate_gradients(updates: Sequence[LocalUpdate]) -> ParamVec:
    """sum (n_k / N) g_k, with weights reduced as exact rationals."""
    total = sum(u.n_k for u in updates)
    agg = np.zeros_like(updates[0].delta_grad)
    for u in updates:
        agg = agg + float(Fraction(u.n_k, total)) * u.delta_grad
    return as_param_vec(agg, copy=False)


def server_round(
    spec: ModelSpec,
    server: ServerState,
    clients: Sequence[ClientRecord],
    cfg: FedConfig,
    val: Fragment,
) -> ServerState:
    if not clients:
        raise DataError("server_round needs at least one client")
    r = server.round
    d = spec.param_count
    exchange = is_exchange_round(r, cfg)
    clients = sorted(clients, key=lambda c: c.id)
    log = list(server.comm_log)

    for c in clients:
        down = BYTES_PER_VALUE * d
        if server.i_val is not None and c.i_val is None:
            down += server.i_val.payload_bytes
        log.append(CommRecord(r, "down", c.id, down))

    def _work(client: ClientRecord) -> LocalUpdate:
        return client_local_update(
            spec, client, server.theta_global, server.i_global, cfg, val,
            round_index=r, i_val=server.i_val,
        )

    with ThreadPoolExecutor(max_workers=worker_count(len(clients))) as pool:
        # map yields in submission order, i.e. client-id order
        updates = list(pool.map(_work, clients))

    for client, u in zip(clients, updates):
        client.theta_local = u.theta_local
        client.i_local = u.i_local
        client.i_val = u.i_val
        log.append(CommRecord(r, "up", client.id, u.bytes_up))

    i_global = server.i_global
    if exchange:
        received = [(from_payload(u.i_local.kind, d, u.fim_wire, u.n_k), u.n_k) for u in updates]
        broadcast = aggregate_fims(received).to_payload()
        i_global = from_payload(server.i_global.kind, d, broadcast, sum(u.n_k for u in updates))
        for c in clients:
            log.append(CommRecord(r, "down", c.id, len(broadcast)))

    grad = aggregate_gradients(updates)
    theta = server.theta_global - cfg.eta * apply_preconditioner(i_global, grad, cfg.penalty)
    ensure_finite(theta, "global parameters", step=r)

    return replace(
        server,
        theta_global=as_param_vec(theta, copy=False),
        i_global=i_global,
        round=r + 1,
        comm_log=tuple(log),
        last_updates=tuple(updates),
    )


# ----------------------------------------------------
# COMMUNICATION ACCOUNTING
# ----------------------------------------------------

@dataclass(frozen=True)
class CommReport:
    bytes_per_client_round: float
    fim_values_per_exchange: int
    relative_to_fedavg: float
    measured_relative_to_fedavg: float


def fim_payload_values(kind: str, d: int, rank_k: int) -> int:
    if kind == "full":
        return d * (d + 1) // 2
    if kind == "diagonal":
        return d
    k = min(rank_k, d)
    return k * d + k + 1


def comm_cost_report(server: ServerState, d: int, cfg: FedConfig) -> CommReport:
    uploads = [rec for rec in server.comm_log if rec.direction == "up"]
    if not uploads:
        raise DataError("communication log has no completed rounds")

    fim_values = fim_payload_values(cfg.fisher.variant_kind, d, cfg.fisher.rank_k)
    params_bytes = BYTES_PER_VALUE * d
    if cfg.fim_exchange:
        relative = 1.0 + fim_values / (cfg.fim_exchange_period * d)
    else:
        relative = 1.0
    per_client_round = float(np.mean([rec.payload_bytes for rec in uploads]))
    return CommReport(
        bytes_per_client_round=per_client_round,
        fim_values_per_exchange=fim_values,
        relative_to_fedavg=relative,
        measured_relative_to_fedavg=per_client_round / params_bytes,
    )


def comm_frame(server: ServerState) -> pd.DataFrame:
    return pd.DataFrame([asdict(rec) for rec in server.comm_log], columns=COMM_COLUMNS)


# ----------------------------------------------------
# DRIVER
# ----------------------------------------------------

@dataclass(frozen=True)
class RoundMetrics:
    round: int
    val_acc: float
    global_loss: float
    bytes_up_total: int
    bytes_down_total: int


@dataclass(frozen=True)
class FedResult:
    server: ServerState
    clients: list[ClientRecord]
    rounds: list[RoundMetrics]

    @property
    def theta(self) -> ParamVec:
        return self.server.theta_global

    def rounds_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(m) for m in self.rounds], columns=ROUND_COLUMNS)


def run_federated(
    spec: ModelSpec,
    train: Fragment,
    val: Fragment,
    cfg: FedConfig,
    theta0: ParamVec | None = None,
) -> FedResult:
    check_fragment(spec, train)
    check_fragment(spec, val)
    shards = partition_dataset(train, cfg, Rng.derive(cfg.seed, "partition"))
    clients = [ClientRecord(id=k, data=frag) for k, frag in enumerate(shards)]
    server = init_server(spec, cfg, val, theta0)

    logger.info(
        f"🚀 Federated run: {cfg.num_clients} clients, {cfg.rounds} rounds, "
        f"lambda={cfg.penalty}, fim={cfg.fisher.variant_kind}, exchange every {cfg.fim_exchange_period}"
    )
    metrics = []
    for _ in range(cfg.rounds):
        r = server.round
        seen = len(server.comm_log)
        server = server_round(spec, server, clients, cfg, val)
        new = server.comm_log[seen:]
        global_loss, _ = loss_and_grad(spec, server.theta_global, train)
        metrics.append(RoundMetrics(
            round=r,
            val_acc=accuracy(spec, server.theta_global, val),
            global_loss=global_loss,
            bytes_up_total=sum(rec.payload_bytes for rec in new if rec.direction == "up"),
            bytes_down_total=sum(rec.payload_bytes for rec in new if rec.direction == "down"),
        ))
        logger.debug(f"round {r}: val_acc={metrics[-1].val_acc:.4f} loss={global_loss:.6f}")

    logger.info(f"✅ Federated run finished, val_acc={metrics[-1].val_acc:.4f}")
    return FedResult(server=server, clients=clients, rounds=metrics)
