"""Exact tabular-MDP machinery for numerically verifying the stage-2
policy-improvement bound.

Everything here is solved with dense linear algebra on small finite MDPs:
value functions from (I - gamma P_pi) V = R_pi, advantages from the Bellman
identity, discounted visitation from the transposed resolvent, the
off-policy surrogate objective, total-variation distances, and the
improvement inequality

    eta(pi2) >= eta(pi1) - (4 eps_max gamma / (1-gamma)^2) * alpha^2

for every surrogate-improving pi2, with the linear and quadratic bounds on
the surrogate gap checked alongside.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TabularMdp:
    """Finite MDP (S, A, P, R, gamma, rho0) with an exact transition tensor."""

    P: np.ndarray  # (S, A, S) transition probabilities
    R: np.ndarray  # (S, A) bounded rewards
    gamma: float
    rho0: np.ndarray  # (S,) initial distribution

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.rho0 = np.asarray(self.rho0, dtype=float)
        S, A, S2 = self.P.shape
        if S != S2 or self.R.shape != (S, A) or self.rho0.shape != (S,):
            raise ValueError("inconsistent MDP dimensions")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must lie in [0, 1)")
        if np.abs(self.P.sum(axis=2) - 1.0).max() > 1e-12:
            raise ValueError("transition rows must sum to 1")
        if abs(self.rho0.sum() - 1.0) > 1e-12:
            raise ValueError("initial distribution must sum to 1")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.abs(self.R).max())


@dataclass
class TabularPolicy:
    """Stochastic policy pi[s, a] with rows on the probability simplex."""

    pi: np.ndarray

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        if self.pi.ndim != 2:
            raise ValueError("policy must be a 2-D (S, A) array")
        if np.abs(self.pi.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("policy rows must sum to 1")


def _markov_matrices(mdp: TabularMdp, policy: TabularPolicy):
    """State transition matrix P_pi and state reward vector R_pi."""
    p_pi = np.einsum("sa,sat->st", policy.pi, mdp.P)
    r_pi = np.einsum("sa,sa->s", policy.pi, mdp.R)
    return p_pi, r_pi


def exact_value(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """V^pi from the exact linear solve (I - gamma P_pi) V = R_pi."""
    p_pi, r_pi = _markov_matrices(mdp, policy)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_pi)


def eta(mdp: TabularMdp, policy: TabularPolicy) -> float:
    """Policy performance: expected discounted return from rho0."""
    return float(mdp.rho0 @ exact_value(mdp, policy))


def exact_q(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    return mdp.R + mdp.gamma * mdp.P @ exact_value(mdp, policy)


def exact_advantage(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """A^pi(s, a) = Q^pi(s, a) - V^pi(s)."""
    v = exact_value(mdp, policy)
    return mdp.R + mdp.gamma * mdp.P @ v - v[:, None]


def discounted_visitation(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """rho_pi = (1 - gamma) * rho0^T (I - gamma P_pi)^{-1}; a distribution."""
    p_pi, _ = _markov_matrices(mdp, policy)
    x = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi.T, mdp.rho0)
    return (1.0 - mdp.gamma) * x


def perf_diff_check(mdp: TabularMdp, pi: TabularPolicy, pi_new: TabularPolicy) -> float:
    """Residual of the performance-difference identity.

    eta(pi~) - eta(pi) = 1/(1-gamma) * sum_s rho_{pi~}(s) sum_a pi~(a|s) A^pi(s,a)
    must hold exactly; returns |LHS - RHS|.
    """
    lhs = eta(mdp, pi_new) - eta(mdp, pi)
    rho = discounted_visitation(mdp, pi_new)
    adv = exact_advantage(mdp, pi)
    rhs = float(rho @ (pi_new.pi * adv).sum(axis=1)) / (1.0 - mdp.gamma)
    return abs(lhs - rhs)


def surrogate(mdp: TabularMdp, pi1: TabularPolicy, pi2: TabularPolicy) -> float:
    """Off-policy first-order objective

    L_{pi1}(pi2) = eta(pi1) + 1/(1-gamma) sum_s rho_{pi1}(s) sum_a pi2(a|s) A^{pi1}(s,a).
    """
    rho = discounted_visitation(mdp, pi1)
    adv = exact_advantage(mdp, pi1)
    return eta(mdp, pi1) + float(rho @ (pi2.pi * adv).sum(axis=1)) / (1.0 - mdp.gamma)


def tv_max(pi1: TabularPolicy, pi2: TabularPolicy) -> float:
    """Worst-state total-variation distance max_s 0.5 sum_a |pi1 - pi2|."""
    return float(0.5 * np.abs(pi1.pi - pi2.pi).sum(axis=1).max())


def max_abs_advantage(mdp: TabularMdp, policy: TabularPolicy) -> float:
    return float(np.abs(exact_advantage(mdp, policy)).max())


def theorem1_check(
    mdp: TabularMdp, pi1: TabularPolicy, pi2: TabularPolicy, tol: float = 1e-9
) -> dict:
    """Improvement inequality for a surrogate-improving pi2.

    Returns {holds, slack, surrogate_improving}; when pi2 does not improve
    the surrogate the inequality's premise fails and the check is skipped
    (holds=True vacuously, slack=nan).
    """
    l11 = eta(mdp, pi1)
    l12 = surrogate(mdp, pi1, pi2)
    if l12 < l11 - tol:
        return {"holds": True, "slack": float("nan"), "surrogate_improving": False}
    alpha = tv_max(pi1, pi2)
    eps_max = max_abs_advantage(mdp, pi1)
    rhs = l11 - 4.0 * eps_max * mdp.gamma / (1.0 - mdp.gamma) ** 2 * alpha**2
    slack = eta(mdp, pi2) - rhs
    return {"holds": bool(slack >= -tol), "slack": float(slack), "surrogate_improving": True}


def gap_bound_check(mdp: TabularMdp, pi1: TabularPolicy, pi2: TabularPolicy, tol: float = 1e-9) -> dict:
    """Surrogate-gap bounds: |eta(pi2) - L_{pi1}(pi2)| against the linear
    bound 2 eps gamma alpha / (1-gamma)^2 and the quadratic bound
    4 eps gamma alpha^2 / (1-gamma)^2."""
    gap = abs(eta(mdp, pi2) - surrogate(mdp, pi1, pi2))
    alpha = tv_max(pi1, pi2)
    eps_max = max_abs_advantage(mdp, pi1)
    scale = eps_max * mdp.gamma / (1.0 - mdp.gamma) ** 2
    linear = 2.0 * scale * alpha
    quadratic = 4.0 * scale * alpha**2
    return {
        "gap": float(gap),
        "linear_bound": float(linear),
        "quadratic_bound": float(quadratic),
        "linear_ok": bool(gap <= linear + tol),
        "quadratic_ok": bool(gap <= quadratic + tol),
        "alpha": float(alpha),
    }


def greedy_policy(mdp: TabularMdp, base: TabularPolicy) -> TabularPolicy:
    """Deterministic per-state argmax of A^base (equivalently Q^base)."""
    adv = exact_advantage(mdp, base)
    pi = np.zeros_like(base.pi)
    pi[np.arange(mdp.n_states), adv.argmax(axis=1)] = 1.0
    return TabularPolicy(pi)


def random_mdp(
    rng: np.random.Generator,
    n_states: int | None = None,
    n_actions: int | None = None,
    gamma: float | None = None,
) -> TabularMdp:
    """Random verification instance: Dirichlet(1) transition rows, rewards
    uniform in [-1, 1], S <= 8, A <= 4, gamma in {0.5, 0.9, 0.95}."""
    S = n_states or int(rng.integers(2, 9))
    A = n_actions or int(rng.integers(2, 5))
    g = gamma if gamma is not None else float(rng.choice([0.5, 0.9, 0.95]))
    P = rng.dirichlet(np.ones(S), size=(S, A))
    R = rng.uniform(-1.0, 1.0, size=(S, A))
    rho0 = rng.dirichlet(np.ones(S))
    return TabularMdp(P=P, R=R, gamma=g, rho0=rho0)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> TabularPolicy:
    return TabularPolicy(rng.dirichlet(np.ones(n_actions), size=n_states))


def perturbed_policy(
    rng: np.random.Generator, base: TabularPolicy, scale: float
) -> TabularPolicy:
    """Nearby policy: mix the base with a random policy by ``scale``."""
    noise = rng.dirichlet(np.ones(base.pi.shape[1]), size=base.pi.shape[0])
    return TabularPolicy((1.0 - scale) * base.pi + scale * noise)


def gradient_match_check(
    mdp: TabularMdp, pi1: TabularPolicy, rng: np.random.Generator, h: float = 1e-5
) -> float:
    """First-order match of the surrogate at pi2 = pi1.

    Central finite differences of eta and L_{pi1} along a random direction in
    the policy simplex tangent space must agree; returns the relative error.
    """
    d = rng.standard_normal(pi1.pi.shape)
    d -= d.mean(axis=1, keepdims=True)  # stay on the simplex
    # keep pi +/- h*d strictly positive
    margin = pi1.pi.min()
    if margin < 10 * h * np.abs(d).max():
        d *= margin / (10 * h * np.abs(d).max())

    def eta_at(step):
        return eta(mdp, TabularPolicy(pi1.pi + step * d))

    def surr_at(step):
        return surrogate(mdp, pi1, TabularPolicy(pi1.pi + step * d))

    d_eta = (eta_at(h) - eta_at(-h)) / (2 * h)
    d_surr = (surr_at(h) - surr_at(-h)) / (2 * h)
    denom = max(abs(d_eta), abs(d_surr), 1e-12)
    return abs(d_eta - d_surr) / denom


@dataclass
class VerificationReport:
    """Aggregate result of the improvement-theory verification suite."""

    n_instances: int
    lemma1_ok: bool
    worst_value_excess: float
    worst_perf_diff_residual: float
    worst_surrogate_self_residual: float
    theorem1_ok: bool
    worst_theorem1_slack: float
    n_theorem1_checked: int
    linear_gap_ok: bool
    quadratic_gap_ok: bool
    worst_gradient_match: float
    counterexamples: list = field(default_factory=list)

    @property
    def all_ok(self) -> bool:
        return (
            self.lemma1_ok
            and self.worst_perf_diff_residual < 1e-8
            and self.worst_surrogate_self_residual < 1e-12
            and self.theorem1_ok
            and self.linear_gap_ok
            and self.worst_gradient_match < 1e-3
        )


def run_verification(
    n_instances: int = 1000, seed: int = 2024, gradient_checks: int = 50
) -> VerificationReport:
    """Run the full numerical verification suite on random tabular MDPs.

    Per instance: value/advantage bounds, the performance-difference
    identity, surrogate self-consistency L_{pi1}(pi1) = eta(pi1), the
    improvement inequality on greedy and perturbed surrogate-improving
    policies, and both surrogate-gap bounds.  Counterexamples (if any)
    are collected for serialization.
    """
    rng = np.random.default_rng(seed)
    report = VerificationReport(
        n_instances=n_instances,
        lemma1_ok=True,
        worst_value_excess=-np.inf,
        worst_perf_diff_residual=0.0,
        worst_surrogate_self_residual=0.0,
        theorem1_ok=True,
        worst_theorem1_slack=np.inf,
        n_theorem1_checked=0,
        linear_gap_ok=True,
        quadratic_gap_ok=True,
        worst_gradient_match=0.0,
    )
    for i in range(n_instances):
        mdp = random_mdp(rng)
        pi = random_policy(rng, mdp.n_states, mdp.n_actions)
        pi_new = random_policy(rng, mdp.n_states, mdp.n_actions)

        v = exact_value(mdp, pi)
        adv = exact_advantage(mdp, pi)
        v_cap = mdp.r_max / (1.0 - mdp.gamma)
        excess = max(np.abs(v).max() - v_cap, np.abs(adv).max() - 2.0 * v_cap)
        report.worst_value_excess = max(report.worst_value_excess, float(excess))
        if excess > 1e-9:
            report.lemma1_ok = False
            report.counterexamples.append(_serialize_case("lemma1", mdp, pi, pi_new))

        resid = perf_diff_check(mdp, pi, pi_new)
        report.worst_perf_diff_residual = max(report.worst_perf_diff_residual, resid)
        if resid >= 1e-8:
            report.counterexamples.append(_serialize_case("perf_diff", mdp, pi, pi_new))

        self_resid = abs(surrogate(mdp, pi, pi) - eta(mdp, pi))
        report.worst_surrogate_self_residual = max(
            report.worst_surrogate_self_residual, self_resid
        )
        if self_resid >= 1e-12:
            report.counterexamples.append(_serialize_case("surrogate_self", mdp, pi, pi))

        candidates = [greedy_policy(mdp, pi), perturbed_policy(rng, pi, 0.05), pi_new]
        for pi2 in candidates:
            t1 = theorem1_check(mdp, pi, pi2)
            if t1["surrogate_improving"]:
                report.n_theorem1_checked += 1
                report.worst_theorem1_slack = min(report.worst_theorem1_slack, t1["slack"])
                if not t1["holds"]:
                    report.theorem1_ok = False
                    report.counterexamples.append(_serialize_case("theorem1", mdp, pi, pi2))
            gaps = gap_bound_check(mdp, pi, pi2)
            if not gaps["linear_ok"]:
                report.linear_gap_ok = False
                report.counterexamples.append(_serialize_case("gap_linear", mdp, pi, pi2))
            if not gaps["quadratic_ok"]:
                report.quadratic_gap_ok = False
                report.counterexamples.append(_serialize_case("gap_quadratic", mdp, pi, pi2))

        if i < gradient_checks:
            err = gradient_match_check(mdp, pi, rng)
            report.worst_gradient_match = max(report.worst_gradient_match, err)
    return report


def _serialize_case(kind: str, mdp: TabularMdp, pi1: TabularPolicy, pi2: TabularPolicy) -> dict:
    return {
        "kind": kind,
        "P": mdp.P.tolist(),
        "R": mdp.R.tolist(),
        "gamma": mdp.gamma,
        "rho0": mdp.rho0.tolist(),
        "pi1": pi1.pi.tolist(),
        "pi2": pi2.pi.tolist(),
    }


def replay_case(case: dict) -> dict:
    """Re-run every check on a serialized counterexample instance."""
    mdp = TabularMdp(
        P=np.array(case["P"]), R=np.array(case["R"]),
        gamma=case["gamma"], rho0=np.array(case["rho0"]),
    )
    pi1 = TabularPolicy(np.array(case["pi1"]))
    pi2 = TabularPolicy(np.array(case["pi2"]))
    return {
        "perf_diff_residual": perf_diff_check(mdp, pi1, pi2),
        "surrogate_self_residual": abs(surrogate(mdp, pi1, pi1) - eta(mdp, pi1)),
        "theorem1": theorem1_check(mdp, pi1, pi2),
        "gap_bounds": gap_bound_check(mdp, pi1, pi2),
    }
