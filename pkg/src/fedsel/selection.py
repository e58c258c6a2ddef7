"""Client-selection policies and their server-side state.

Four interchangeable strategies:

* ``rand``  — weighted random sampling proportional to data fractions.
* ``pow-d`` — poll d candidates for their exact current local loss and keep
  the m largest (costs d extra evaluation messages per round).
* ``rpow-d`` — like pow-d but ranks candidates by the loss each one reported
  when it was last selected (stale, but free of extra messages).
* ``ucb-cs`` — rank every client by fraction * (discounted mean reported
  loss + exploration bonus) and keep the top m; the discount keeps the
  estimate responsive while the bonus forces revisits of long-unselected
  clients.

Module-level functions implement each policy; thin strategy classes own the
mutable state and plug into the training loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .models import ParamVector

STRATEGY_NAMES = ("rand", "pow-d", "rpow-d", "ucb-cs")
COLD_START_MODES = ("explore", "rand")


@dataclass
class SelectionContext:
    """Read-only view of the server state a policy may consult.

    ``full_loss`` evaluates one client's loss on its complete local training
    set against the current global model; every call counts as one extra
    evaluation message in the round's communication ledger.
    """

    round_index: int
    num_clients: int
    num_selected: int
    fractions: np.ndarray
    params: ParamVector | None = None
    full_loss: Callable[[int], float] | None = None


@dataclass
class CommLedger:
    """Per-round message counts: 2m model messages plus any evaluation polls."""

    model_messages: list[int] = field(default_factory=list)
    extra_eval_messages: list[int] = field(default_factory=list)

    def record(self, model: int, extra: int) -> None:
        if model < 0 or extra < 0:
            raise ValueError("message counts must be non-negative")
        self.model_messages.append(model)
        self.extra_eval_messages.append(extra)

    def per_round_totals(self) -> list[int]:
        return [m + e for m, e in zip(self.model_messages, self.extra_eval_messages)]


def round_message_counts(strategy: str, m: int, d: int | None = None) -> tuple[int, int]:
    """Expected (model, extra) message counts for one round of a strategy."""
    if strategy not in STRATEGY_NAMES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    if strategy == "pow-d":
        if d is None:
            raise ConfigError("pow-d needs d to account for its polling messages")
        return 2 * m, d
    return 2 * m, 0


def comm_cost(ledger: CommLedger, strategy: str) -> list[int]:
    """Total messages per recorded round for a given strategy's ledger."""
    if strategy not in STRATEGY_NAMES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    return ledger.per_round_totals()


def weighted_sample_without_replacement(
    weights: np.ndarray, count: int, rng: np.random.Generator
) -> list[int]:
    """Sequential weighted sampling: draw one id proportional to the remaining
    weights, remove it, renormalize, repeat ``count`` times."""
    w = np.asarray(weights, dtype=np.float64).copy()
    if count > w.size:
        raise ConfigError(f"cannot draw {count} distinct ids from {w.size}")
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with positive sum")
    chosen: list[int] = []
    for _ in range(count):
        cdf = np.cumsum(w)
        u = rng.random() * cdf[-1]
        idx = int(np.searchsorted(cdf, u, side="right"))
        idx = min(idx, w.size - 1)  # guard the u == total edge
        chosen.append(idx)
        w[idx] = 0.0
    return chosen


def _top_m_random_ties(scores: np.ndarray, m: int, rng: np.random.Generator) -> list[int]:
    """Indices of the m largest scores; exact ties broken uniformly at random."""
    tie_break = rng.random(scores.size)
    order = np.lexsort((tie_break, -scores))
    return [int(i) for i in order[:m]]


# ---------------------------------------------------------------------------
# rand / pow-d / rpow-d
# ---------------------------------------------------------------------------


def select_rand(ctx: SelectionContext, rng: np.random.Generator) -> list[int]:
    """m distinct clients drawn proportionally to their data fractions."""
    return weighted_sample_without_replacement(ctx.fractions, ctx.num_selected, rng)


def select_powd(ctx: SelectionContext, d: int, rng: np.random.Generator) -> list[int]:
    """Poll d fraction-weighted candidates for their exact current local loss
    and keep the m with the largest losses (ties uniformly at random)."""
    _check_poll_size(ctx, d)
    if ctx.full_loss is None:
        raise ConfigError("pow-d needs a full-loss evaluation capability")
    candidates = weighted_sample_without_replacement(ctx.fractions, d, rng)
    losses = np.array([ctx.full_loss(k) for k in candidates], dtype=np.float64)
    keep = _top_m_random_ties(losses, ctx.num_selected, rng)
    return [candidates[i] for i in keep]


@dataclass
class StaleLossTable:
    """Last reported loss per client; NaN marks a client never selected."""

    last_loss: np.ndarray
    last_round: np.ndarray

    @classmethod
    def create(cls, num_clients: int) -> StaleLossTable:
        return cls(
            last_loss=np.full(num_clients, np.nan),
            last_round=np.full(num_clients, -1, dtype=np.int64),
        )

    def update(self, reports: Sequence, round_index: int) -> None:
        for rep in reports:
            if not 0 <= rep.client_id < self.last_loss.size:
                raise ValueError(f"report from unknown client {rep.client_id}")
            self.last_loss[rep.client_id] = rep.mean_loss
            self.last_round[rep.client_id] = round_index


def select_rpowd(
    ctx: SelectionContext, table: StaleLossTable, d: int, rng: np.random.Generator
) -> list[int]:
    """Like pow-d but ranks candidates by their stale recorded loss; clients
    never selected rank above all others. No extra messages."""
    _check_poll_size(ctx, d)
    candidates = weighted_sample_without_replacement(ctx.fractions, d, rng)
    stale = table.last_loss[candidates]
    scores = np.where(np.isnan(stale), np.inf, stale)
    keep = _top_m_random_ties(scores, ctx.num_selected, rng)
    return [candidates[i] for i in keep]


def _check_poll_size(ctx: SelectionContext, d: int) -> None:
    if d < ctx.num_selected:
        raise ConfigError(f"poll size d={d} must be at least m={ctx.num_selected}")
    if d > ctx.num_clients:
        raise ConfigError(f"poll size d={d} exceeds the client count {ctx.num_clients}")


# ---------------------------------------------------------------------------
# Discounted-UCB selection
# ---------------------------------------------------------------------------


@dataclass
class BanditState:
    """Per-client discounted statistics driving the UCB scores.

    ``discounted_loss`` and ``discounted_count`` are geometrically discounted
    sums of reported mean losses and of selection indicators; both decay by
    ``gamma`` once per communication round. ``discounted_rounds`` is the
    matching discounted round count, and ``max_step_loss_std`` tracks the
    largest per-client standard deviation of step losses seen in the latest
    reports (it scales the exploration bonus).
    """

    gamma: float
    discounted_loss: np.ndarray
    discounted_count: np.ndarray
    ever_selected: np.ndarray
    discounted_rounds: float = 0.0
    max_step_loss_std: float = 0.0
    round_index: int = 0

    @classmethod
    def create(cls, num_clients: int, gamma: float) -> BanditState:
        if not 0.0 <= gamma <= 1.0:
            raise ConfigError(f"gamma={gamma} must lie in [0, 1]")
        return cls(
            gamma=gamma,
            discounted_loss=np.zeros(num_clients),
            discounted_count=np.zeros(num_clients),
            ever_selected=np.zeros(num_clients, dtype=bool),
        )

    @property
    def num_clients(self) -> int:
        return self.discounted_loss.size


def step_loss_std(step_losses: np.ndarray) -> float:
    """Sample standard deviation of one client's per-step losses; a single
    local step carries no spread information and yields 0."""
    x = np.asarray(step_losses, dtype=np.float64)
    if x.size <= 1:
        return 0.0
    return float(np.std(x, ddof=1))


def ucb_update(state: BanditState, reports: Sequence) -> BanditState:
    """Advance the bandit state by one finished round.

    Every client's sums decay by gamma, then each reporting client adds its
    mean reported loss and one visit. The exploration scale becomes the
    largest step-loss standard deviation among this round's reports
    (unchanged when there are none). Mutates and returns ``state``.
    """
    state.discounted_loss *= state.gamma
    state.discounted_count *= state.gamma
    for rep in reports:
        if not 0 <= rep.client_id < state.num_clients:
            raise ValueError(f"report from unknown client {rep.client_id}")
        state.discounted_loss[rep.client_id] += rep.mean_loss
        state.discounted_count[rep.client_id] += 1.0
        state.ever_selected[rep.client_id] = True
    state.discounted_rounds = state.gamma * state.discounted_rounds + 1.0
    if len(reports):
        state.max_step_loss_std = max(step_loss_std(rep.step_losses) for rep in reports)
    state.round_index += 1
    return state


def ucb_index(state: BanditState, client_id: int, fraction: float) -> float:
    """Selection score for one client: +inf while no discounted observations
    remain (forces exploration), otherwise
    fraction * (mean discounted loss + sqrt(2 sigma^2 ln(T) / count))."""
    count = state.discounted_count[client_id]
    if count <= 0.0:
        return math.inf
    exploit = state.discounted_loss[client_id] / count
    log_rounds = max(math.log(max(state.discounted_rounds, 1.0)), 0.0)
    bonus = math.sqrt(2.0 * state.max_step_loss_std**2 * log_rounds / count)
    return fraction * (exploit + bonus)


def ucb_scores(state: BanditState, fractions: np.ndarray, unvisited: float = math.inf) -> np.ndarray:
    """Vector of UCB scores for all clients; ``unvisited`` overrides the score
    of clients with no remaining discounted observations."""
    scores = np.empty(state.num_clients)
    for k in range(state.num_clients):
        value = ucb_index(state, k, float(fractions[k]))
        scores[k] = value if math.isfinite(value) else unvisited
    return scores


def select_ucb(
    state: BanditState,
    ctx: SelectionContext,
    rng: np.random.Generator,
    cold_start: str = "explore",
) -> list[int]:
    """Top-m clients by UCB score, ties (including unvisited ones) broken
    uniformly at random.

    ``cold_start`` controls unvisited clients: ``explore`` scores them +inf so
    the first ceil(K/m) rounds sweep everyone; ``rand`` falls back to weighted
    random sampling on the very first round and scores unvisited clients 0
    afterwards.
    """
    if cold_start not in COLD_START_MODES:
        raise ConfigError(f"unknown cold_start mode {cold_start!r}")
    if cold_start == "rand":
        if state.round_index == 0:
            return select_rand(ctx, rng)
        scores = ucb_scores(state, ctx.fractions, unvisited=0.0)
    else:
        scores = ucb_scores(state, ctx.fractions, unvisited=math.inf)
    return _top_m_random_ties(scores, ctx.num_selected, rng)


# ---------------------------------------------------------------------------
# Strategy objects
# ---------------------------------------------------------------------------


class SelectionStrategy:
    """Stateful policy interface driven by the round loop: ``select`` picks
    the next active set, ``observe`` ingests the finished round's reports."""

    name = "base"

    def select(self, ctx: SelectionContext, rng: np.random.Generator) -> list[int]:
        raise NotImplementedError

    def observe(self, reports: Sequence) -> None:
        pass

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, state: dict) -> None:
        if state:
            raise ValueError(f"{self.name} strategy carries no state")


class RandomSelection(SelectionStrategy):
    name = "rand"

    def select(self, ctx, rng):
        return select_rand(ctx, rng)


class PowerOfChoiceSelection(SelectionStrategy):
    name = "pow-d"

    def __init__(self, d: int):
        self.d = int(d)

    def select(self, ctx, rng):
        return select_powd(ctx, self.d, rng)


class StalePowerOfChoiceSelection(SelectionStrategy):
    name = "rpow-d"

    def __init__(self, d: int, num_clients: int):
        self.d = int(d)
        self.table = StaleLossTable.create(num_clients)
        self._round = 0

    def select(self, ctx, rng):
        return select_rpowd(ctx, self.table, self.d, rng)

    def observe(self, reports):
        self._round += 1
        self.table.update(reports, self._round)

    def state_dict(self):
        return {
            "round": self._round,
            "last_loss": [None if np.isnan(v) else float(v) for v in self.table.last_loss],
            "last_round": self.table.last_round.tolist(),
        }

    def load_state_dict(self, state):
        self._round = int(state["round"])
        self.table.last_loss = np.array(
            [np.nan if v is None else v for v in state["last_loss"]], dtype=np.float64
        )
        self.table.last_round = np.array(state["last_round"], dtype=np.int64)


class DiscountedUcbSelection(SelectionStrategy):
    name = "ucb-cs"

    def __init__(
        self,
        num_clients: int,
        gamma: float,
        cold_start: str = "explore",
        collect_trace: bool = False,
    ):
        if cold_start not in COLD_START_MODES:
            raise ConfigError(f"unknown cold_start mode {cold_start!r}")
        self.state = BanditState.create(num_clients, gamma)
        self.cold_start = cold_start
        self.collect_trace = collect_trace
        self.trace: list[dict] = []

    def select(self, ctx, rng):
        if self.collect_trace:
            self.trace.append(
                {
                    "round": ctx.round_index,
                    "discounted_loss": self.state.discounted_loss.copy(),
                    "discounted_count": self.state.discounted_count.copy(),
                    "max_step_loss_std": self.state.max_step_loss_std,
                    "scores": ucb_scores(self.state, ctx.fractions),
                }
            )
        return select_ucb(self.state, ctx, rng, self.cold_start)

    def observe(self, reports):
        ucb_update(self.state, reports)

    def state_dict(self):
        return {
            "gamma": self.state.gamma,
            "discounted_loss": self.state.discounted_loss.tolist(),
            "discounted_count": self.state.discounted_count.tolist(),
            "ever_selected": self.state.ever_selected.tolist(),
            "discounted_rounds": self.state.discounted_rounds,
            "max_step_loss_std": self.state.max_step_loss_std,
            "round": self.state.round_index,
        }

    def load_state_dict(self, state):
        self.state.gamma = float(state["gamma"])
        self.state.discounted_loss = np.array(state["discounted_loss"], dtype=np.float64)
        self.state.discounted_count = np.array(state["discounted_count"], dtype=np.float64)
        self.state.ever_selected = np.array(state["ever_selected"], dtype=bool)
        self.state.discounted_rounds = float(state["discounted_rounds"])
        self.state.max_step_loss_std = float(state["max_step_loss_std"])
        self.state.round_index = int(state["round"])


def make_strategy(
    name: str,
    num_clients: int,
    d: int | None = None,
    gamma: float | None = None,
    cold_start: str = "explore",
    collect_trace: bool = False,
) -> SelectionStrategy:
    """Build a strategy from its config string and strategy-specific keys."""
    if name == "rand":
        return RandomSelection()
    if name in ("pow-d", "rpow-d"):
        if d is None:
            raise ConfigError(f"{name} requires the poll size d")
        if name == "pow-d":
            return PowerOfChoiceSelection(d)
        return StalePowerOfChoiceSelection(d, num_clients)
    if name == "ucb-cs":
        return DiscountedUcbSelection(
            num_clients,
            gamma if gamma is not None else 0.7,
            cold_start=cold_start,
            collect_trace=collect_trace,
        )
    raise ConfigError(f"unknown strategy {name!r} (expected one of {', '.join(STRATEGY_NAMES)})")
