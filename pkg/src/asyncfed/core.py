"""Shared domain vocabulary: clients, models, importance weights, and the
federated / surrogate objectives built from them.

Everything here is a pure function over immutable inputs and safe to call
concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Sequence

import numpy as np

PROB_TOL = 1e-12


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class ConfigurationError(ValueError):
    """A fleet, policy, or run setup is internally inconsistent."""


class InvalidWeightsError(ValueError):
    """An aggregation-weight vector violates its declared kind."""


class UnsupportedConfigError(ConfigurationError):
    """A combination of policy, hardware, and scheme is not supported."""


class NumericOverflowError(RuntimeError):
    """Local or global parameters left the finite range.

    Carries the index of the SGD step (or aggregation round) that produced
    the first non-finite or out-of-range value.
    """

    def __init__(self, step_index: int, message: str | None = None):
        self.step_index = step_index
        super().__init__(message or f"non-finite parameters at step {step_index}")


class SeedCollisionError(ValueError):
    """Two ensemble members were given the same seed."""


class SnapshotsUnavailableError(RuntimeError):
    """Per-step local snapshots were not recorded for this trajectory."""


class StalenessCapError(RuntimeError):
    """A contribution exceeded the configured maximum staleness."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClientSpec:
    """One client of the fleet.

    ``compute_time`` is the mean local update time: taken literally under
    fixed hardware, used as the mean of an exponential draw under stochastic
    hardware. ``objective_ref`` indexes the fleet's objective table,
    ``distribution_id`` groups clients sharing a data distribution.
    """

    id: int
    importance: float
    compute_time: Fraction | float
    objective_ref: int
    distribution_id: int = 0

    def __post_init__(self):
        if self.importance <= 0 or self.importance > 1:
            raise ConfigurationError(
                f"client {self.id}: importance must lie in (0, 1], got {self.importance}"
            )
        if self.compute_time <= 0:
            raise ConfigurationError(
                f"client {self.id}: compute_time must be positive, got {self.compute_time}"
            )


class Fleet:
    """A fixed set of clients plus the objective table their specs point into.

    The engine never relies on clients being sorted by compute time.
    """

    def __init__(self, clients: Sequence[ClientSpec], objectives: Sequence):
        self.clients = tuple(clients)
        self.objectives = tuple(objectives)
        if not self.clients:
            raise ConfigurationError("empty fleet")
        total = math.fsum(c.importance for c in self.clients)
        if abs(total - 1.0) > PROB_TOL:
            raise ConfigurationError(f"client importances sum to {total!r}, expected 1")
        for c in self.clients:
            if not 0 <= c.objective_ref < len(self.objectives):
                raise ConfigurationError(
                    f"client {c.id}: unresolvable objective_ref {c.objective_ref}"
                )
        dims = {self.objective_for(c).dim for c in self.clients}
        if len(dims) != 1:
            raise ConfigurationError(f"clients disagree on parameter dimension: {dims}")
        self.dim = dims.pop()

    def __len__(self) -> int:
        return len(self.clients)

    def objective_for(self, client: ClientSpec):
        return self.objectives[client.objective_ref]

    @property
    def importances(self) -> np.ndarray:
        return np.array([c.importance for c in self.clients])

    @property
    def compute_times(self) -> tuple:
        return tuple(c.compute_time for c in self.clients)

    @property
    def distribution_ids(self) -> tuple[int, ...]:
        return tuple(c.distribution_id for c in self.clients)


def uniform_importances(n_clients: int) -> list[float]:
    """Default importance vector: every client weighted 1/M."""
    return [1.0 / n_clients] * n_clients


@dataclass(frozen=True)
class GlobalModel:
    """A server model tagged with its aggregation round and wall time."""

    params: np.ndarray
    round: int = 0
    wall_time: float = 0.0


@dataclass(frozen=True)
class Contribution:
    """A delivered client update: the difference between the client's local
    endpoint and the global model it trained from."""

    client_id: int
    anchor_round: int
    delta: np.ndarray
    delivery_time: float


class WeightKind(Enum):
    IMPORTANCE = "importance"
    DETERMINISTIC = "deterministic"
    EXPECTED = "expected"
    NORMALIZED = "normalized"


@dataclass(frozen=True)
class WeightVector:
    values: np.ndarray
    kind: WeightKind

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if np.any(self.values < 0):
            raise InvalidWeightsError(f"{self.kind.value} weights must be nonnegative")
        if self.kind in (WeightKind.NORMALIZED, WeightKind.IMPORTANCE):
            total = math.fsum(self.values.tolist())
            if abs(total - 1.0) > PROB_TOL:
                raise InvalidWeightsError(
                    f"{self.kind.value} weights sum to {total!r}, expected 1"
                )


def _as_params(model) -> np.ndarray:
    if isinstance(model, GlobalModel):
        return model.params
    return np.atleast_1d(np.asarray(model, dtype=float))


def _as_weights(weights, n_clients: int) -> np.ndarray:
    values = weights.values if isinstance(weights, WeightVector) else np.asarray(weights, dtype=float)
    if values.shape != (n_clients,):
        raise ConfigurationError(
            f"weight vector has shape {values.shape}, expected ({n_clients},)"
        )
    return values


# ---------------------------------------------------------------------------
# Objectives over the fleet
# ---------------------------------------------------------------------------

def federated_loss(model, fleet: Fleet) -> float:
    """Importance-weighted full-batch loss sum(p_i * L_i(theta))."""
    params = _as_params(model)
    if params.shape[-1] != fleet.dim:
        raise ConfigurationError(
            f"model dimension {params.shape[-1]} does not match fleet dimension {fleet.dim}"
        )
    return math.fsum(
        c.importance * fleet.objective_for(c).value(params) for c in fleet.clients
    )


def surrogate_loss(model, weights, fleet: Fleet) -> float:
    """Loss of the round-level problem sum(q_i(n) * L_i(theta)).

    ``weights`` are the expected aggregation weights of the round; they need
    not be normalized. Negative entries are rejected.
    """
    params = _as_params(model)
    q = _as_weights(weights, len(fleet))
    if np.any(q < 0):
        raise InvalidWeightsError("surrogate weights must be nonnegative")
    return math.fsum(
        qi * fleet.objective_for(c).value(params)
        for qi, c in zip(q, fleet.clients)
        if qi != 0.0
    )


@dataclass(frozen=True)
class ResidualEstimate:
    """Monte-Carlo estimate of the gradient second moment at an optimum."""

    value: float
    stderr: float
    n_draws: int


def convergence_residual(
    fleet: Fleet,
    weights_avg,
    optimum,
    *,
    n_draws: int = 1000,
    batch_size: int | None = None,
    rng: np.random.Generator | None = None,
) -> ResidualEstimate:
    """Estimate sum(q_i * E||grad L_i(theta_bar, xi)||^2) at ``optimum``.

    With full gradients (``batch_size=None`` and noiseless objectives) every
    draw is identical, so the estimate is exact and the standard error is 0.
    The caller supplies the optimum; see :func:`weighted_optimum`.
    """
    if n_draws <= 0:
        raise ConfigurationError("n_draws must be positive")
    q = _as_weights(weights_avg, len(fleet))
    theta = _as_params(optimum)
    rng = rng or np.random.default_rng(0)

    total = 0.0
    var_total = 0.0
    for qi, client in zip(q, fleet.clients):
        if qi == 0.0:
            continue
        obj = fleet.objective_for(client)
        samples = np.empty(n_draws)
        for s in range(n_draws):
            g = _draw_gradient(obj, theta, batch_size, rng)
            samples[s] = float(np.dot(g, g))
        total += qi * samples.mean()
        if n_draws > 1:
            var_total += qi * qi * samples.var(ddof=1) / n_draws
    return ResidualEstimate(total, math.sqrt(var_total), n_draws)


def _draw_gradient(obj, theta, batch_size, rng):
    if batch_size is not None and hasattr(obj, "n_samples"):
        idx = rng.choice(obj.n_samples, size=min(batch_size, obj.n_samples), replace=False)
        return obj.batch_gradient(theta, idx)
    if getattr(obj, "noise_std", 0.0) > 0.0:
        return obj.noisy_gradient(theta, rng)
    return obj.gradient(theta)


@dataclass(frozen=True)
class DistributionWeights:
    """Per-distribution importance r_j and expected weight s_j."""

    ids: tuple[int, ...]
    importance: np.ndarray        # r_j, sums to 1
    expected: np.ndarray          # s_j
    expected_normalized: np.ndarray  # s_j / sum(s), zeros preserved


def distribution_weights(fleet: Fleet, per_round_q) -> DistributionWeights:
    """Fold per-client importances and expected weights by distribution id."""
    q = _as_weights(per_round_q, len(fleet))
    ids = sorted(set(fleet.distribution_ids))
    index = {j: pos for pos, j in enumerate(ids)}
    r = np.zeros(len(ids))
    s = np.zeros(len(ids))
    for qi, client in zip(q, fleet.clients):
        pos = index[client.distribution_id]
        r[pos] += client.importance
        s[pos] += qi
    total = s.sum()
    s_tilde = s / total if total > 0 else np.zeros_like(s)
    return DistributionWeights(tuple(ids), r, s, s_tilde)


# ---------------------------------------------------------------------------
# Optima
# ---------------------------------------------------------------------------

def weighted_optimum(
    fleet: Fleet,
    weights=None,
    *,
    grad_tol: float = 1e-10,
    max_iter: int = 500_000,
) -> np.ndarray:
    """Minimizer of the ``weights``-weighted objective (defaults to p_i).

    All-quadratic fleets use the closed form; otherwise deterministic
    full-gradient descent with step 1/L runs until the gradient norm drops
    below ``grad_tol``.
    """
    w = fleet.importances if weights is None else _as_weights(weights, len(fleet))
    objs = [fleet.objective_for(c) for c in fleet.clients]
    if all(hasattr(o, "quadratic_coefficients") for o in objs):
        a_sum = np.zeros(fleet.dim)
        b_sum = np.zeros(fleet.dim)
        for wi, obj in zip(w, objs):
            a, b, _ = obj.quadratic_coefficients()
            a_sum += wi * a
            b_sum += wi * b
        if np.any(a_sum <= 0):
            raise ConfigurationError("weighted quadratic has a flat direction; no finite optimum")
        return -b_sum / (2.0 * a_sum)

    smoothness = math.fsum(wi * o.smoothness for wi, o in zip(w, objs))
    step = 1.0 / smoothness
    theta = np.zeros(fleet.dim)
    for _ in range(max_iter):
        grad = np.zeros(fleet.dim)
        for wi, obj in zip(w, objs):
            if wi != 0.0:
                grad += wi * obj.gradient(theta)
        if np.linalg.norm(grad) < grad_tol:
            return theta
        theta = theta - step * grad
    raise RuntimeError(
        f"gradient descent did not reach gradient norm {grad_tol} in {max_iter} iterations"
    )
