"""The FedAvg round loop.

Each communication round: the strategy picks m active clients, every active
client runs tau steps of local SGD from the broadcast global model, the
server takes the unweighted mean of the returned models, and the reports
(mean per-step losses) feed back into the strategy. Everything is
deterministic given the config seed: per-(client, round) minibatch streams
and per-round selection streams are derived by hashing the seed with fixed
tags, so clients can run concurrently with sequential-identical results.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, models
from .data import ClientShard, FederatedDataset
from .errors import ConfigError, NonFiniteLossError
from .models import MinibatchEval, ModelSpec, ParamVector
from .selection import CommLedger, SelectionContext, SelectionStrategy, step_loss_std

# Stream tags keep the derived RNG families disjoint.
_INIT_STREAM = 0
_CLIENT_STREAM = 1
_SELECT_STREAM = 2

_CHECKPOINT_MAGIC = b"FCK1"


@dataclass
class TrainConfig:
    """Round-loop hyperparameters.

    Exactly one of ``m`` (active clients per round) or ``fraction`` (active
    fraction of the client pool, resolved as round(fraction * K), floored at
    1) must be set. ``lr_milestones`` lists the round indices at which the
    learning rate halves.
    """

    rounds: int
    tau: int
    batch_size: int
    eta0: float
    lr_milestones: tuple[int, ...] = ()
    m: int | None = None
    fraction: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.lr_milestones = tuple(int(r) for r in self.lr_milestones)
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.tau < 1:
            raise ConfigError("tau must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.eta0 < 0:
            raise ConfigError("eta0 must be >= 0")
        if (self.m is None) == (self.fraction is None):
            raise ConfigError("set exactly one of m or fraction")
        if self.m is not None and self.m < 1:
            raise ConfigError("m must be >= 1")
        if self.fraction is not None and not 0 < self.fraction <= 1:
            raise ConfigError("fraction must lie in (0, 1]")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def resolve_m(self, num_clients: int) -> int:
        m = self.m if self.m is not None else max(1, round(self.fraction * num_clients))
        if m > num_clients:
            raise ConfigError(f"m={m} exceeds the client count {num_clients}")
        return m


@dataclass
class ClientReport:
    """One client's contribution to a round: its updated model and the mean
    minibatch loss observed before each of its tau local updates."""

    client_id: int
    step_losses: np.ndarray
    mean_loss: float
    updated_params: ParamVector


@dataclass
class RoundRecord:
    round_index: int
    selected: tuple[int, ...]
    global_train_loss: float
    eta: float
    sigma: float
    model_msgs: int
    extra_msgs: int
    test_accuracy: float | None = None
    jain: float | None = None
    wall_ms: float = 0.0


@dataclass
class RunResult:
    records: list[RoundRecord]
    params: ParamVector
    ledger: CommLedger


def client_rng(seed: int, client_id: int, round_index: int) -> np.random.Generator:
    """Independent minibatch stream for one (client, round) cell."""
    return np.random.default_rng([seed, _CLIENT_STREAM, client_id, round_index])


def selection_rng(seed: int, round_index: int) -> np.random.Generator:
    """Independent stream for one round's selection decisions."""
    return np.random.default_rng([seed, _SELECT_STREAM, round_index])


def init_rng_seed(seed: int) -> list[int]:
    return [seed, _INIT_STREAM]


def lr_at(cfg: TrainConfig, round_index: int) -> float:
    """Learning rate for a 1-based round: eta0 halved once per milestone
    already reached."""
    if round_index < 1:
        raise ValueError("rounds are 1-based")
    halvings = sum(1 for milestone in cfg.lr_milestones if milestone <= round_index)
    return cfg.eta0 * 0.5**halvings


def local_update(
    client: ClientShard,
    global_params: ParamVector,
    spec: ModelSpec,
    cfg: TrainConfig,
    round_index: int,
    rng: np.random.Generator,
) -> ClientReport:
    """Run tau SGD steps on one client starting from the global model.

    Minibatches of size b are drawn uniformly with replacement per step; when
    b equals the shard size the full shard is used deterministically (the
    exact-gradient limit). The loss of each minibatch is recorded at the
    pre-update parameters of that step.
    """
    data = client.data
    n = len(data)
    eta = lr_at(cfg, round_index)
    params = global_params.copy()
    step_losses = np.empty(cfg.tau)
    for step in range(cfg.tau):
        if cfg.batch_size == n:
            batch = data
        else:
            batch = data.subset(rng.integers(0, n, size=cfg.batch_size))
        evaluation: MinibatchEval = models.loss_and_grad(spec, params, batch)
        step_losses[step] = evaluation.mean_loss
        params.values -= eta * evaluation.gradient.values
    return ClientReport(
        client_id=client.client_id,
        step_losses=step_losses,
        mean_loss=float(step_losses.mean()),
        updated_params=params,
    )


def aggregate(reports: list[ClientReport]) -> ParamVector:
    """Unweighted coordinate-wise mean of the returned models, summed in
    ascending client-id order so the result is independent of report order."""
    if not reports:
        raise ValueError("nothing to aggregate")
    ordered = sorted(reports, key=lambda rep: rep.client_id)
    layout = ordered[0].updated_params.layout
    total = np.zeros_like(ordered[0].updated_params.values)
    for rep in ordered:
        if rep.updated_params.layout != layout:
            raise ValueError("parameter layouts differ across reports")
        total += rep.updated_params.values
    return ParamVector(total / len(ordered), layout)


def max_report_std(reports: list[ClientReport]) -> float:
    return max(step_loss_std(rep.step_losses) for rep in reports)


def run(
    dataset: FederatedDataset,
    spec: ModelSpec,
    cfg: TrainConfig,
    strategy: SelectionStrategy,
    eval_every: int = 10,
    checkpoint_every: int | None = None,
    checkpoint_path=None,
    resume: "Checkpoint | None" = None,
    round_callback=None,
) -> RunResult:
    """Run the full round loop and return per-round records plus the final model.

    The global training loss (data-fraction-weighted mean of per-client full
    losses) is recorded every round; test accuracy and the Jain index are
    recorded every ``eval_every`` rounds and at the final round. Aborts with
    :class:`NonFiniteLossError` (carrying the partial records) if the global
    loss stops being finite. ``round_callback(round_index, params, record)``
    is invoked after each round when given.
    """
    num_clients = dataset.num_clients
    m = cfg.resolve_m(num_clients)
    p = dataset.fractions
    if eval_every < 1:
        raise ConfigError("eval_every must be >= 1")

    start_round = 1
    if resume is not None:
        if resume.seed != cfg.seed:
            raise ConfigError("checkpoint seed does not match the config seed")
        params = resume.params.copy()
        strategy.load_state_dict(resume.strategy_state)
        start_round = resume.round_index + 1
    else:
        params = models.init_params(spec, seed=init_rng_seed(cfg.seed))

    ledger = CommLedger()
    records: list[RoundRecord] = []
    for round_index in range(start_round, cfg.rounds + 1):
        t0 = time.perf_counter()
        eta = lr_at(cfg, round_index)
        extra_polls = [0]

        def full_loss(client_id: int, _params=params) -> float:
            extra_polls[0] += 1
            return models.loss(spec, _params, dataset.shards[client_id].data)

        ctx = SelectionContext(
            round_index=round_index,
            num_clients=num_clients,
            num_selected=m,
            fractions=p,
            params=params,
            full_loss=full_loss,
        )
        selected = strategy.select(ctx, selection_rng(cfg.seed, round_index))
        selected = sorted(int(k) for k in selected)
        if len(set(selected)) != m or any(not 0 <= k < num_clients for k in selected):
            raise ConfigError(f"strategy returned an invalid active set {selected}")

        reports = [
            local_update(dataset.shards[k], params, spec, cfg, round_index, client_rng(cfg.seed, k, round_index))
            for k in selected
        ]
        params = aggregate(reports)
        strategy.observe(reports)

        losses = metrics.client_losses(dataset, spec, params)
        global_train_loss = metrics.global_loss(p, losses)
        ledger.record(model=2 * m, extra=extra_polls[0])

        record = RoundRecord(
            round_index=round_index,
            selected=tuple(selected),
            global_train_loss=global_train_loss,
            eta=eta,
            sigma=max_report_std(reports),
            model_msgs=2 * m,
            extra_msgs=extra_polls[0],
        )
        if not np.isfinite(global_train_loss):
            records.append(record)
            raise NonFiniteLossError(
                f"global training loss became non-finite ({global_train_loss}) at round {round_index}",
                round_index=round_index,
                records=records,
            )
        if round_index % eval_every == 0 or round_index == cfg.rounds:
            record.jain = metrics.jain_index(losses)
            if len(dataset.test_set):
                record.test_accuracy = models.accuracy(spec, params, dataset.test_set)
        record.wall_ms = (time.perf_counter() - t0) * 1000.0
        records.append(record)

        if checkpoint_every and checkpoint_path and round_index % checkpoint_every == 0:
            save_checkpoint(
                checkpoint_path,
                Checkpoint(
                    round_index=round_index,
                    seed=cfg.seed,
                    params=params,
                    strategy_name=strategy.name,
                    strategy_state=strategy.state_dict(),
                ),
            )
        if round_callback is not None:
            round_callback(round_index, params, record)

    return RunResult(records=records, params=params, ledger=ledger)


# ---------------------------------------------------------------------------
# Checkpoints: JSON metadata header + serialized parameter vector
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    round_index: int
    seed: int
    params: ParamVector
    strategy_name: str
    strategy_state: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = json.dumps(
        {
            "round": ckpt.round_index,
            "seed": ckpt.seed,
            "strategy": ckpt.strategy_name,
            "strategy_state": ckpt.strategy_state,
        }
    ).encode()
    body = models.params_to_bytes(ckpt.params)
    Path(path).write_bytes(_CHECKPOINT_MAGIC + struct.pack("<I", len(meta)) + meta + body)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != _CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a fedsel checkpoint")
    (mlen,) = struct.unpack_from("<I", buf, 4)
    meta = json.loads(buf[8 : 8 + mlen].decode())
    params = models.params_from_bytes(buf[8 + mlen :])
    return Checkpoint(
        round_index=int(meta["round"]),
        seed=int(meta["seed"]),
        params=params,
        strategy_name=meta["strategy"],
        strategy_state=meta["strategy_state"],
    )
