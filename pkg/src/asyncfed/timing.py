"""Client compute clocks and the server waiting-time policy.

A round advances the fleet by the policy's waiting time, collects the set of
clients whose local work lands inside it, and rebases those clients on the
round they will receive next. Fixed hardware is kept in exact rational (or
integer) arithmetic so cycle-based invariants hold without float drift.

Simultaneous completions under the purely asynchronous policy are serialized:
the lowest-index finisher gets its own round and the remaining finishers
follow in zero-duration rounds. One aggregation per contribution is what
makes the per-cycle round count equal sum(lcm/tau_i) and keeps window
averages of the expected weights exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

import numpy as np

from .core import ConfigurationError, UnsupportedConfigError


class PolicyKind(Enum):
    SYNCHRONOUS = "synchronous"
    ASYNCHRONOUS = "asynchronous"
    FEDFIX = "fedfix"
    FEDBUFF = "fedbuff"
    SAMPLE_UNIFORM = "sample_uniform"
    SAMPLE_MD = "sample_md"
    SAMPLE_BIASED = "sample_biased"


_SAMPLING_KINDS = frozenset(
    {PolicyKind.SAMPLE_UNIFORM, PolicyKind.SAMPLE_MD, PolicyKind.SAMPLE_BIASED}
)

BIASED_CRITERIA = ("fastest", "highest_loss")


def _exact(value) -> Fraction | int:
    """Exact representation of a time quantity; ints stay ints."""
    if isinstance(value, int):
        return value
    frac = Fraction(value)
    return int(frac) if frac.denominator == 1 else frac


@dataclass(frozen=True)
class WaitPolicy:
    """Server waiting-time policy and its parameters."""

    kind: PolicyKind
    delta_t: Fraction | float | None = None   # fedfix only
    m: int | None = None                      # fedbuff and sampling kinds
    criterion: str | None = None              # biased sampling only

    def __post_init__(self):
        if self.kind is PolicyKind.FEDFIX:
            if self.delta_t is None or self.delta_t <= 0:
                raise ConfigurationError("fedfix requires delta_t > 0")
            object.__setattr__(self, "delta_t", _exact(self.delta_t))
        if self.kind is PolicyKind.FEDBUFF or self.kind in _SAMPLING_KINDS:
            if self.m is None or self.m < 1:
                raise ConfigurationError(f"{self.kind.value} requires m >= 1")
        if self.kind is PolicyKind.SAMPLE_BIASED:
            if self.criterion not in BIASED_CRITERIA:
                raise ConfigurationError(
                    f"biased sampling criterion must be one of {BIASED_CRITERIA}"
                )

    @property
    def is_sampling(self) -> bool:
        return self.kind in _SAMPLING_KINDS


@dataclass(frozen=True)
class HardwareModel:
    """Client update-time model: deterministic or exponential with the
    client's compute_time as mean."""

    mode: str = "fixed"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("fixed", "exponential"):
            raise ConfigurationError(f"unknown hardware mode {self.mode!r}")

    def make_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def draw(self, tau, rng: np.random.Generator | None):
        if self.mode == "fixed":
            return _exact(tau)
        if rng is None:
            raise ConfigurationError("exponential hardware needs an RNG")
        return float(rng.exponential(scale=float(tau)))


@dataclass
class FleetState:
    """Mutable per-client clocks and staleness anchors.

    ``remaining[i]`` is the time client i still needs on its current local
    work; ``anchor[i]`` is the round of the global model it trains from.
    Owned and mutated by exactly one simulation loop.
    """

    remaining: list
    anchor: list[int]
    busy: list[bool]
    clock: Fraction | float
    round_index: int = 0

    @property
    def n_clients(self) -> int:
        return len(self.remaining)


def init_fleet_state(
    taus,
    hw: HardwareModel,
    rng: np.random.Generator | None = None,
    initial_clocks=None,
) -> FleetState:
    """All clients start busy on the round-0 model at time 0.

    ``initial_clocks`` overrides the first remaining times (fixed hardware
    only), which phase-shifts client deliveries without changing their
    periods.
    """
    taus = list(taus)
    if not taus:
        raise ConfigurationError("empty fleet")
    if initial_clocks is not None:
        if hw.mode != "fixed":
            raise ConfigurationError("initial clock offsets require fixed hardware")
        if len(initial_clocks) != len(taus):
            raise ConfigurationError("initial_clocks length must match the fleet")
        remaining = [_exact(c) for c in initial_clocks]
        if any(c <= 0 for c in remaining):
            raise ConfigurationError("initial clocks must be positive")
    else:
        remaining = [hw.draw(tau, rng) for tau in taus]
    clock = 0 if hw.mode == "fixed" else 0.0
    return FleetState(
        remaining=remaining,
        anchor=[0] * len(taus),
        busy=[True] * len(taus),
        clock=clock,
        round_index=0,
    )


@dataclass(frozen=True)
class Participant:
    client_id: int
    multiplicity: int
    anchor_round: int
    staleness: int


@dataclass(frozen=True)
class RoundOutcome:
    index: int
    delta_t: Fraction | float
    participants: tuple[Participant, ...]

    @property
    def participant_ids(self) -> tuple[int, ...]:
        return tuple(p.client_id for p in self.participants)


def advance_round(
    state: FleetState,
    policy: WaitPolicy,
    taus,
    hw: HardwareModel,
    *,
    hw_rng: np.random.Generator | None = None,
    sample_rng: np.random.Generator | None = None,
    client_losses=None,
    importances=None,
    time_limit=None,
) -> RoundOutcome | None:
    """Advance one aggregation round, mutating ``state``.

    Returns the participant set (with staleness bookkeeping) and the round
    duration. When ``time_limit`` is given and the round would end past it,
    the state is left untouched and ``None`` is returned.
    """
    n = state.round_index
    n_clients = state.n_clients
    if n_clients == 0:
        raise ConfigurationError("empty fleet")

    if policy.is_sampling:
        return _advance_sampling_round(
            state, policy, taus, hw, hw_rng, sample_rng, client_losses, importances, time_limit
        )

    kind = policy.kind
    if kind is PolicyKind.SYNCHRONOUS:
        dt = max(state.remaining)
        selected = list(range(n_clients))
    elif kind is PolicyKind.ASYNCHRONOUS:
        dt = min(state.remaining)
        selected = [state.remaining.index(dt)]  # ties serialized, lowest index first
    elif kind is PolicyKind.FEDFIX:
        dt = policy.delta_t if hw.mode == "fixed" else float(policy.delta_t)
        selected = [i for i, t in enumerate(state.remaining) if t <= dt]
    elif kind is PolicyKind.FEDBUFF:
        if policy.m > n_clients:
            raise ConfigurationError("fedbuff m exceeds the fleet size")
        dt = sorted(state.remaining)[policy.m - 1]
        selected = [i for i, t in enumerate(state.remaining) if t <= dt]
    else:  # pragma: no cover
        raise ConfigurationError(f"unhandled policy kind {kind}")

    if time_limit is not None and state.clock + dt > time_limit:
        return None

    participants = tuple(
        Participant(i, 1, state.anchor[i], n - state.anchor[i]) for i in selected
    )
    selected_set = set(selected)
    for i in range(n_clients):
        if i in selected_set:
            state.remaining[i] = hw.draw(taus[i], hw_rng)
            state.anchor[i] = n + 1
        else:
            state.remaining[i] = state.remaining[i] - dt
    state.clock = state.clock + dt
    state.round_index = n + 1
    return RoundOutcome(n, dt, participants)


def _advance_sampling_round(
    state, policy, taus, hw, hw_rng, sample_rng, client_losses, importances, time_limit
):
    """Per-round client sampling: selected clients train on the current
    model, everyone else idles (treated as infinitely slow for the round)."""
    n = state.round_index
    n_clients = state.n_clients
    m = policy.m
    if m > n_clients:
        raise ConfigurationError("sample size m exceeds the fleet size")

    if policy.kind is PolicyKind.SAMPLE_UNIFORM:
        if sample_rng is None:
            raise ConfigurationError("uniform sampling needs a sampling RNG")
        chosen = sample_rng.choice(n_clients, size=m, replace=False)
        counts = {int(i): 1 for i in chosen}
    elif policy.kind is PolicyKind.SAMPLE_MD:
        if sample_rng is None:
            raise ConfigurationError("multinomial sampling needs a sampling RNG")
        if importances is None:
            raise ConfigurationError("multinomial sampling needs client importances")
        p = np.asarray(importances, dtype=float)
        draws = sample_rng.choice(n_clients, size=m, replace=True, p=p)
        counts = {}
        for i in draws:
            counts[int(i)] = counts.get(int(i), 0) + 1
    else:  # biased deterministic criterion
        if policy.criterion == "fastest":
            order = sorted(range(n_clients), key=lambda i: (taus[i], i))
        else:
            if client_losses is None:
                raise ConfigurationError("highest_loss criterion needs client losses")
            order = sorted(range(n_clients), key=lambda i: (-client_losses[i], i))
        counts = {i: 1 for i in order[:m]}

    times = {i: hw.draw(taus[i], hw_rng) for i in counts}
    dt = max(times.values())
    if time_limit is not None and state.clock + dt > time_limit:
        return None

    participants = tuple(
        Participant(i, mult, n, 0) for i, mult in sorted(counts.items())
    )
    for i in range(n_clients):
        state.anchor[i] = n + 1
    state.clock = state.clock + dt
    state.round_index = n + 1
    return RoundOutcome(n, dt, participants)


def simulate_schedule(
    taus,
    policy: WaitPolicy,
    n_rounds: int,
    *,
    initial_clocks=None,
) -> list[RoundOutcome]:
    """Deterministic participation schedule under fixed hardware."""
    hw = HardwareModel("fixed")
    state = init_fleet_state(taus, hw, initial_clocks=initial_clocks)
    outcomes = []
    for _ in range(n_rounds):
        outcomes.append(advance_round(state, policy, list(taus), hw))
    return outcomes


def cycle_length_rounds(taus) -> int:
    """Rounds per repetition of the asynchronous fixed-hardware schedule:
    sum over clients of lcm({tau_i}) / tau_i."""
    exact = [Fraction(t) for t in taus]
    nu = _rational_lcm(exact)
    return int(sum(nu / t for t in exact))


def _rational_lcm(values: list[Fraction]) -> Fraction:
    num = 1
    den = values[0].denominator
    for v in values:
        num = num * v.numerator // math.gcd(num, v.numerator)
        den = math.gcd(den, v.denominator)
    return Fraction(num, den)


def staleness_bound(policy: WaitPolicy, hw: HardwareModel, taus) -> int:
    """Maximum rounds a delivered contribution can lag behind its anchor.

    Synchronous participation and per-round sampling never lag. Fixed-window
    aggregation uses the ceiling bound ceil(tau_max / delta_t). The purely
    asynchronous and buffered policies are measured exactly by replaying the
    deterministic schedule over its cycle.
    """
    if hw.mode != "fixed":
        raise UnsupportedConfigError(
            "staleness is a random variable under exponential hardware; "
            "measure it empirically from a trajectory"
        )
    kind = policy.kind
    if kind is PolicyKind.SYNCHRONOUS or policy.is_sampling:
        return 0
    if kind is PolicyKind.FEDFIX:
        ratio = Fraction(_exact(max(taus))) / Fraction(_exact(policy.delta_t))
        return int(math.ceil(ratio))
    if kind in (PolicyKind.ASYNCHRONOUS, PolicyKind.FEDBUFF):
        return _measured_staleness(policy, taus)
    raise UnsupportedConfigError(f"no staleness bound for policy {kind}")


def _measured_staleness(policy: WaitPolicy, taus, max_rounds: int = 200_000) -> int:
    hw = HardwareModel("fixed")
    state = init_fleet_state(taus, hw)
    seen = {tuple(state.remaining): 0}
    period = None
    first_repeat = None
    worst = 0
    history: list[RoundOutcome] = []
    for _ in range(max_rounds):
        outcome = advance_round(state, policy, list(taus), hw)
        history.append(outcome)
        key = tuple(state.remaining)
        if period is None and key in seen:
            first_repeat = state.round_index
            period = first_repeat - seen[key]
        elif period is None:
            seen[key] = state.round_index
        if period is not None and state.round_index >= first_repeat + 2 * period:
            start = first_repeat + period  # skip one period of anchor warm-up
            for out in history[start:]:
                for part in out.participants:
                    worst = max(worst, part.staleness)
            return worst
    raise RuntimeError("participation schedule did not cycle within the round cap")


@dataclass(frozen=True)
class CovarianceStats:
    """Second-moment parameters of the stochastic aggregation weights:
    E[w_i w_j] = alpha * q_i * q_j for i != j, and beta bounds the
    per-client excess d_i - alpha * q_i."""

    alpha: float
    beta: float
    biased: bool = False


def sampler_covariance(
    policy: WaitPolicy,
    n_clients: int,
    *,
    d=None,
    p=None,
) -> CovarianceStats:
    """Covariance parameters (alpha, beta) for a participation scheme.

    Deterministic-criterion sampling is flagged ``biased``: participation is
    a 0/1 product event, which gives alpha = 1 and beta = 0 but no weighting
    scheme can make the round unbiased.
    """
    kind = policy.kind
    if kind is PolicyKind.SYNCHRONOUS or kind is PolicyKind.FEDFIX:
        return CovarianceStats(1.0, 0.0)
    if kind is PolicyKind.SAMPLE_BIASED:
        return CovarianceStats(1.0, 0.0, biased=True)
    if kind is PolicyKind.ASYNCHRONOUS:
        if d is None:
            raise ConfigurationError("asynchronous covariance needs the weight vector d")
        return CovarianceStats(0.0, float(np.max(d)))
    if kind is PolicyKind.SAMPLE_UNIFORM:
        if d is None:
            raise ConfigurationError("uniform-sampling covariance needs the weight vector d")
        m = policy.m
        if m > n_clients:
            raise ConfigurationError("sample size exceeds the fleet")
        if n_clients == 1 or m == n_clients:
            return CovarianceStats(1.0, 0.0)
        alpha = (m - 1) * n_clients / (m * (n_clients - 1))
        beta = float(np.max(d)) * (n_clients - m) / (n_clients - 1)
        return CovarianceStats(alpha, beta)
    if kind is PolicyKind.SAMPLE_MD:
        if d is None or p is None:
            raise ConfigurationError("multinomial covariance needs d and p")
        m = policy.m
        alpha = (m - 1) / m
        d = np.asarray(d, dtype=float)
        p = np.asarray(p, dtype=float)
        beta = float(np.max(d * (1.0 - (m - 1) * p)))
        return CovarianceStats(alpha, max(beta, 0.0))
    raise UnsupportedConfigError(f"no covariance parameters for policy {kind}")


def simulate_round_times(
    policy: WaitPolicy,
    hw: HardwareModel,
    taus,
    n_rounds: int,
    *,
    seed: int = 0,
    importances=None,
) -> np.ndarray:
    """Empirical round durations, for checking expected-time formulas."""
    rng = np.random.default_rng(seed)
    state = init_fleet_state(taus, hw, rng)
    out = np.empty(n_rounds)
    taus = list(taus)
    for k in range(n_rounds):
        if policy.kind is PolicyKind.SAMPLE_UNIFORM:
            chosen = rng.choice(len(taus), size=min(policy.m, len(taus)), replace=False)
            out[k] = max(hw.draw(taus[i], rng) for i in chosen)
            continue
        outcome = advance_round(state, policy, taus, hw, hw_rng=rng, sample_rng=rng)
        out[k] = float(outcome.delta_t)
    return out
