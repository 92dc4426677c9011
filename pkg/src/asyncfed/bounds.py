"""Evaluable convergence-bound terms, the learning-rate ceiling, per-scheme
parameter presets, and the exponent conditions for asymptotic convergence.

Every big-O constant is set to 1, so the numbers are only meaningful for
ordering and trend comparisons, never as absolute predictions. Reports carry
that convention explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import ConfigurationError, Fleet, UnsupportedConfigError, weighted_optimum
from .timing import HardwareModel, PolicyKind, WaitPolicy, staleness_bound
from .weights import WeightScheme, plan_weights

OCAL_CONSTANTS = 1.0


@dataclass(frozen=True)
class BoundInputs:
    n_clients: int
    k_steps: int
    n_rounds: int
    eta_g: float
    eta_l: float
    smoothness: float
    tau: float
    window: float
    alpha: float
    beta: float
    sigma: float = 0.0       # gradient second moment at the long-run optimum
    sigma1: float = 0.0      # per-round analog entering the local-drift term
    max_q: float = 1.0
    residual: float = 0.0    # mean surrogate-optimum gap across rounds
    init_gap_sq: float = 1.0
    chi_sq: float = 0.0
    rho: float = 1.0

    def __post_init__(self):
        numeric = (
            self.eta_g, self.eta_l, self.smoothness, self.tau, self.window,
            self.alpha, self.beta, self.sigma, self.sigma1, self.max_q,
            self.residual, self.init_gap_sq, self.chi_sq, self.rho,
        )
        if any(v < 0 for v in numeric):
            raise ConfigurationError("bound inputs must be nonnegative")
        if self.n_rounds < 1 or self.k_steps < 1 or self.n_clients < 1 or self.window < 1:
            raise ConfigurationError("N, K, M, W must be at least 1")


@dataclass(frozen=True)
class EpsilonTerms:
    eps_f: float
    eps_k: float
    eps_alpha: float
    eps_beta: float
    eps_w: float

    @property
    def total(self) -> float:
        return self.eps_f + self.eps_k + self.eps_alpha + self.eps_beta + self.eps_w


def epsilon_terms(inputs: BoundInputs) -> EpsilonTerms:
    """Evaluate the five bound terms with unit constants.

    The total is nondecreasing in each of tau, window, alpha, beta, sigma,
    sigma1, and residual when the others are held fixed.
    """
    eta = inputs.eta_g * inputs.eta_l
    k = inputs.k_steps
    if eta == 0:
        eps_f = math.inf if inputs.init_gap_sq > 0 else 0.0
    else:
        eps_f = inputs.init_gap_sq / (eta * k * inputs.n_rounds)
    eps_k = inputs.eta_l ** 2 * (k - 1) ** 2 * (inputs.residual + inputs.sigma1)
    delay_factor = eta + eta ** 2 * k ** 2 * inputs.tau ** 2
    eps_alpha = inputs.alpha * delay_factor * (inputs.residual + inputs.max_q * inputs.sigma)
    eps_beta = inputs.beta * delay_factor * (inputs.residual + inputs.sigma)
    eps_w = eta * (inputs.window - 1) * k
    return EpsilonTerms(eps_f, eps_k, eps_alpha, eps_beta, eps_w)


def lr_constraint(k_steps: int, smoothness: float, rho: float, eta_g: float, tau: float) -> float:
    """Largest admissible local learning rate,
    1/(48 K L) * min(1, 1/(3 rho^2 eta_g (tau + 1)))."""
    if smoothness <= 0:
        raise ConfigurationError("smoothness constant must be positive")
    if k_steps < 1:
        raise ConfigurationError("k_steps must be at least 1")
    base = 1.0 / (48.0 * k_steps * smoothness)
    damping = 3.0 * rho ** 2 * eta_g * (tau + 1.0)
    return base * min(1.0, 1.0 / damping) if damping > 0 else base


def exponent_check(a: float, b: float, c: float) -> bool:
    """Admissibility of growth exponents: window ~ N^a and staleness ~ N^b
    are compatible with a learning rate ~ N^-c iff max(a, b) < c < 1."""
    if min(a, b, c) < 0:
        raise ConfigurationError("exponents must be nonnegative")
    return max(a, b) < c < 1.0


@dataclass(frozen=True)
class SchemePreset:
    scheme: str
    alpha: float
    beta: float
    tau: int
    window: int
    residual: float
    n_rounds: float     # aggregations per time budget
    d: tuple[float, ...]


_PRESET_SCHEMES = ("sync", "async", "fedfix")


def scheme_presets(
    scheme: str,
    fleet: Fleet,
    policy: WaitPolicy | None = None,
    time_budget: float = 1.0,
) -> SchemePreset:
    """Fill the per-scheme bound parameters for a fixed-hardware fleet."""
    if scheme not in _PRESET_SCHEMES:
        raise UnsupportedConfigError(f"no preset for scheme {scheme!r}")
    taus = [float(t) for t in fleet.compute_times]
    tau_max = max(taus)
    hw = HardwareModel("fixed")

    if scheme == "sync":
        return SchemePreset(
            scheme, 1.0, 0.0, 0, 1, 0.0, time_budget / tau_max,
            tuple(fleet.importances),
        )
    if scheme == "async":
        async_policy = WaitPolicy(PolicyKind.ASYNCHRONOUS)
        plan = plan_weights(
            WeightScheme.ASYNC_TIME_BASED, fleet.importances, fleet.compute_times, async_policy, hw
        )
        return SchemePreset(
            scheme,
            0.0,
            float(plan.d.max()),
            staleness_bound(async_policy, hw, fleet.compute_times),
            plan.window,
            residual_mean_gap(fleet),
            sum(time_budget / t for t in taus),
            tuple(plan.d),
        )
    if policy is None or policy.kind is not PolicyKind.FEDFIX:
        raise ConfigurationError("the fedfix preset needs a fedfix policy with delta_t")
    plan = plan_weights(
        WeightScheme.FEDFIX_TIME_BASED, fleet.importances, fleet.compute_times, policy, hw
    )
    return SchemePreset(
        scheme,
        1.0,
        0.0,
        staleness_bound(policy, hw, fleet.compute_times),
        plan.window,
        residual_mean_gap(fleet),
        time_budget / float(policy.delta_t),
        tuple(plan.d),
    )


def residual_mean_gap(fleet: Fleet) -> float:
    """Mean over clients of L_i(theta_star) - L_i(theta_i_star): how far the
    federated optimum sits from each client's own optimum. Exact for
    quadratic objectives."""
    theta_star = weighted_optimum(fleet)
    total = 0.0
    for client in fleet.clients:
        obj = fleet.objective_for(client)
        if hasattr(obj, "optimum"):
            local_opt = obj.optimum
        else:
            single = Fleet([_solo_client(client)], [obj])
            local_opt = weighted_optimum(single)
        total += obj.value(theta_star) - obj.value(local_opt)
    return total / len(fleet)


def _solo_client(client):
    from .core import ClientSpec

    return ClientSpec(0, 1.0, client.compute_time, 0, client.distribution_id)


def fill_inputs(preset: SchemePreset, base: BoundInputs) -> BoundInputs:
    """Overlay a scheme preset onto shared bound inputs."""
    from dataclasses import replace

    return replace(
        base,
        alpha=preset.alpha,
        beta=preset.beta,
        tau=preset.tau,
        window=preset.window,
        residual=preset.residual,
        max_q=max(preset.d),
    )


def format_report(inputs: BoundInputs, terms: EpsilonTerms) -> str:
    """Flat machine-parseable key-value block."""
    lines = [
        "ocal_constants = 1",
        f"n_clients = {inputs.n_clients}",
        f"k_steps = {inputs.k_steps}",
        f"n_rounds = {inputs.n_rounds}",
        f"eta_g = {inputs.eta_g:.17g}",
        f"eta_l = {inputs.eta_l:.17g}",
        f"smoothness = {inputs.smoothness:.17g}",
        f"tau = {inputs.tau:.17g}",
        f"window = {inputs.window:.17g}",
        f"alpha = {inputs.alpha:.17g}",
        f"beta = {inputs.beta:.17g}",
        f"sigma = {inputs.sigma:.17g}",
        f"sigma1 = {inputs.sigma1:.17g}",
        f"max_q = {inputs.max_q:.17g}",
        f"residual = {inputs.residual:.17g}",
        f"init_gap_sq = {inputs.init_gap_sq:.17g}",
        f"chi_sq = {inputs.chi_sq:.17g}",
        f"rho = {inputs.rho:.17g}",
        f"eps_f = {terms.eps_f:.17g}",
        f"eps_k = {terms.eps_k:.17g}",
        f"eps_alpha = {terms.eps_alpha:.17g}",
        f"eps_beta = {terms.eps_beta:.17g}",
        f"eps_w = {terms.eps_w:.17g}",
        f"total = {terms.total:.17g}",
        f"lr_max = {lr_constraint(inputs.k_steps, inputs.smoothness, inputs.rho, inputs.eta_g, inputs.tau):.17g}",
    ]
    return "\n".join(lines) + "\n"
