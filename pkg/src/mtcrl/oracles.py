"""Analytic ground truths used as verification oracles: the closed-form
two-task Bayes posterior, its extreme-case linear weights, and the
closed-form spurious-coordinate weights of least-squares / minimum-norm
linear regression, each paired with an independent numerical counterpart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class OracleError(Exception):
    pass


class UnsupportedExtremeError(OracleError):
    pass


class SpuriousNotIdentifiableError(OracleError):
    pass


@dataclass
class BayesParams:
    """Per-factor regression vectors and the label-agreement probability."""

    beta_a: np.ndarray
    beta_b: np.ndarray
    m_c: float

    def __post_init__(self):
        self.beta_a = np.atleast_1d(np.asarray(self.beta_a, dtype=np.float64))
        self.beta_b = np.atleast_1d(np.asarray(self.beta_b, dtype=np.float64))
        if not (np.all(np.isfinite(self.beta_a))
                and np.all(np.isfinite(self.beta_b))):
            raise OracleError("regression vectors must be finite")
        if not 0.0 <= self.m_c <= 1.0:
            raise OracleError(f"m_c={self.m_c} outside [0, 1]")

    @classmethod
    def from_moments(cls, mu_a, sigma_a, mu_b, sigma_b, m_c):
        return cls(np.asarray(mu_a) / sigma_a ** 2,
                   np.asarray(mu_b) / sigma_b ** 2, m_c)


def _scores(f_a, f_b, params: BayesParams):
    sa = np.atleast_2d(f_a) @ params.beta_a
    sb = np.atleast_2d(f_b) @ params.beta_b
    return sa, sb


def bayes_logit(f_a, f_b, params: BayesParams):
    """log P(+1|F) - log P(-1|F) of the two-task posterior for the first task.

    The mixture terms are differenced before adding the causal score; at
    m_c = 0.5 they are bitwise equal, so the logit reduces to exactly
    2 * (f_a . beta_a) and the posterior is exactly invariant to f_b.
    """
    sa, sb = _scores(f_a, f_b, params)
    with np.errstate(divide="ignore"):
        log_m = np.log(params.m_c)
        log_1m = np.log(1.0 - params.m_c)
    mix_pos = np.logaddexp(log_m + sb, log_1m - sb)
    mix_neg = np.logaddexp(log_m - sb, log_1m + sb)
    return 2.0 * sa + (mix_pos - mix_neg)


def bayes_posterior(f_a, f_b, params: BayesParams):
    """P(first-task label = +1 | both factors), via the mixture closed form.

    Scalar for 1-d factor inputs, a vector for stacked rows.  Computed in
    log space, so it is stable for large factor magnitudes.
    """
    logit = bayes_logit(f_a, f_b, params)
    out = 1.0 / (1.0 + np.exp(-logit))
    return float(out[0]) if np.asarray(f_a).ndim == 1 else out


def enumerated_posterior(f_a, f_b, mu_a, sigma_a, mu_b, sigma_b, m_c):
    """Independent oracle: Bayes' rule over the four label configurations,
    with explicit Gaussian log-likelihoods."""
    f_a = np.atleast_2d(f_a)
    f_b = np.atleast_2d(f_b)
    mu_a = np.asarray(mu_a, dtype=np.float64)
    mu_b = np.asarray(mu_b, dtype=np.float64)

    def log_lik(f, mu, sigma, y):
        return -np.sum((f - y * mu) ** 2, axis=1) / (2 * sigma ** 2)

    prior = {(1, 1): m_c, (-1, -1): m_c, (1, -1): 1 - m_c, (-1, 1): 1 - m_c}
    log_joint = {}
    with np.errstate(divide="ignore"):
        for (ya, yb), p in prior.items():
            log_joint[(ya, yb)] = (np.log(0.5 * p)
                                   + log_lik(f_a, mu_a, sigma_a, ya)
                                   + log_lik(f_b, mu_b, sigma_b, yb))
    stacked = np.stack(list(log_joint.values()))
    log_total = np.logaddexp.reduce(stacked, axis=0)
    log_pos = np.logaddexp(log_joint[(1, 1)], log_joint[(1, -1)])
    out = np.exp(log_pos - log_total)
    return float(out[0]) if np.asarray(f_a).ndim == 1 else out


def bayes_weight_extremes(params: BayesParams) -> np.ndarray:
    """Effective linear weights of the posterior logit at the two extremes."""
    if params.m_c == 1.0:
        return np.concatenate([2 * params.beta_a, 2 * params.beta_b])
    if params.m_c == 0.5:
        return np.concatenate([2 * params.beta_a, np.zeros_like(params.beta_b)])
    raise UnsupportedExtremeError(
        "closed-form linear weights exist only at m_c in {0.5, 1}; "
        "elsewhere the posterior is not logistic in the factors"
    )


# ---------------------------------------------------------------------------
# linear regression with a spurious coordinate


@dataclass
class LinearRegProblem:
    """Design [C | S] with ground truth that ignores the spurious column S."""

    causal: np.ndarray        # n x d
    spurious: np.ndarray      # n
    theta_star: np.ndarray    # d
    noise: np.ndarray         # n
    sigma: float = 0.0        # stddev used to draw fresh noise

    def __post_init__(self):
        self.causal = np.asarray(self.causal, dtype=np.float64)
        self.spurious = np.asarray(self.spurious, dtype=np.float64).ravel()
        self.theta_star = np.asarray(self.theta_star, dtype=np.float64).ravel()
        self.noise = np.asarray(self.noise, dtype=np.float64).ravel()

    @property
    def n(self):
        return self.causal.shape[0]

    @property
    def d(self):
        return self.causal.shape[1]

    @property
    def design(self) -> np.ndarray:
        return np.column_stack([self.causal, self.spurious])

    def targets(self, noise=None) -> np.ndarray:
        eps = self.noise if noise is None else noise
        return self.causal @ self.theta_star + eps


def make_problem(n: int, d: int, sigma: float, seed: int) -> LinearRegProblem:
    rng = np.random.default_rng(seed)
    return LinearRegProblem(
        causal=rng.standard_normal((n, d)),
        spurious=rng.standard_normal(n),
        theta_star=rng.standard_normal(d),
        noise=rng.standard_normal(n) * sigma,
        sigma=sigma,
    )


def underparam_spurious_weight(problem: LinearRegProblem) -> float:
    """Closed-form least-squares weight on the spurious column (d+1 <= n).

    Uses the orthogonal projector onto col(C), so the formula agrees with
    the pseudo-inverse solution for general (non-orthonormal) C.
    """
    if problem.d + 1 > problem.n:
        raise OracleError("under-parametrized mode requires d+1 <= n")
    c, s = problem.causal, problem.spurious
    coeffs, *_ = np.linalg.lstsq(c, s, rcond=None)
    resid = s - c @ coeffs            # (I - P) S
    denom = s @ resid
    if abs(denom) < 1e-12:
        raise SpuriousNotIdentifiableError(
            "spurious column lies in the span of the causal design"
        )
    return float(resid @ problem.targets() / denom)


def overparam_spurious_weight(problem: LinearRegProblem) -> float:
    """Closed-form minimum-norm weight on the spurious column (d > n),
    via the rank-one update of (C C^T)^-1."""
    if problem.d <= problem.n:
        raise OracleError("over-parametrized mode requires d > n")
    c, s = problem.causal, problem.spurious
    gram = c @ c.T
    try:
        g_s = np.linalg.solve(gram, s)
        g_y = np.linalg.solve(gram, problem.targets())
    except np.linalg.LinAlgError as exc:
        raise OracleError(f"causal Gram matrix is singular: {exc}") from exc
    return float(s @ g_y / (1.0 + s @ g_s))


def lstsq_spurious_weight(problem: LinearRegProblem) -> float:
    """Numerical oracle: last coordinate of pinv(X) y."""
    theta = np.linalg.pinv(problem.design) @ problem.targets()
    return float(theta[-1])


def minnorm_spurious_weight(problem: LinearRegProblem) -> float:
    """Numerical oracle: last coordinate of X^T (X X^T)^-1 y."""
    x = problem.design
    theta = x.T @ np.linalg.solve(x @ x.T, problem.targets())
    return float(theta[-1])


def generalization_gap(problem: LinearRegProblem, n_test: int = 2000,
                       draws: int = 100, seed: int = 0):
    """Monte-Carlo expected squared error with vs without the spurious column.

    For each draw, fresh noise is applied to the fixed design, both models
    are refit, and the error is averaged over fresh standard-normal test
    points.  Returns (L_S, L_C): with-spurious first.
    """
    rng = np.random.default_rng(seed)
    theta_true = np.concatenate([problem.theta_star, [0.0]])
    x_with = problem.design
    x_without = np.column_stack([problem.causal, np.zeros(problem.n)])
    pinv_with = np.linalg.pinv(x_with)
    pinv_without = np.linalg.pinv(x_without)
    loss_s = loss_c = 0.0
    for _ in range(draws):
        eps = rng.standard_normal(problem.n) * problem.sigma
        y = problem.targets(noise=eps)
        test = rng.standard_normal((n_test, problem.d + 1))
        err_s = test @ (pinv_with @ y - theta_true)
        err_c = test @ (pinv_without @ y - theta_true)
        loss_s += float(np.mean(err_s ** 2))
        loss_c += float(np.mean(err_c ** 2))
    return loss_s / draws, loss_c / draws


# ---------------------------------------------------------------------------
# the oracle equivalence suite


def _check(name, max_err, tol):
    return {"check": name, "max_err": float(max_err), "tol": tol,
            "passed": bool(max_err < tol)}


def oracle_check(n_seeds: int = 100, seed: int = 0) -> list[dict]:
    """Run every closed-form-vs-numerical equivalence; one row per check."""
    rng = np.random.default_rng(seed)
    rows = []

    # posterior vs four-configuration enumeration across the m_c grid
    worst = 0.0
    for m_c in np.arange(0.1, 0.95, 0.1):
        mu_a = rng.standard_normal(4)
        mu_b = rng.standard_normal(4)
        sa, sb = 1.3, 0.8
        params = BayesParams.from_moments(mu_a, sa, mu_b, sb, float(m_c))
        f_a = rng.standard_normal((50, 4))
        f_b = rng.standard_normal((50, 4))
        closed = bayes_posterior(f_a, f_b, params)
        brute = enumerated_posterior(f_a, f_b, mu_a, sa, mu_b, sb, float(m_c))
        worst = max(worst, float(np.max(np.abs(closed - brute))))
    rows.append(_check("posterior_vs_enumeration", worst, 1e-10))

    # extreme-case weights in logit space
    worst = 0.0
    for m_c, expect_b in ((1.0, True), (0.5, False)):
        mu_a = rng.standard_normal(3)
        mu_b = rng.standard_normal(3)
        params = BayesParams.from_moments(mu_a, 1.1, mu_b, 0.9, m_c)
        w = bayes_weight_extremes(params)
        f_a = rng.standard_normal((40, 3))
        f_b = rng.standard_normal((40, 3))
        linear = f_a @ w[:3] + f_b @ w[3:]
        worst = max(worst, float(np.max(np.abs(
            bayes_logit(f_a, f_b, params) - linear))))
        if not expect_b:
            assert np.all(w[3:] == 0.0)
    rows.append(_check("extreme_weights_logit", worst, 1e-12))

    # label-flip symmetry and F_b-invariance at m_c = 0.5
    params = BayesParams.from_moments(rng.standard_normal(3), 1.0,
                                      rng.standard_normal(3), 1.0, 0.5)
    f_a = rng.standard_normal((60, 3))
    f_b = rng.standard_normal((60, 3))
    flip = np.max(np.abs(bayes_posterior(f_a, f_b, params)
                         + bayes_posterior(-f_a, -f_b, params) - 1.0))
    rows.append(_check("label_flip_symmetry", flip, 1e-12))
    invariance = np.max(np.abs(bayes_posterior(f_a, f_b, params)
                               - bayes_posterior(f_a, -3.0 * f_b, params)))
    rows.append(_check("mc_half_ignores_fb", invariance, 1e-15))

    # spurious-weight closed forms vs numerical solutions
    worst_u = worst_o = 0.0
    for k in range(n_seeds):
        p_u = make_problem(n=50, d=5, sigma=0.5, seed=1000 + k)
        worst_u = max(worst_u, abs(underparam_spurious_weight(p_u)
                                   - lstsq_spurious_weight(p_u)))
        p_o = make_problem(n=10, d=50, sigma=0.5, seed=2000 + k)
        worst_o = max(worst_o, abs(overparam_spurious_weight(p_o)
                                   - minnorm_spurious_weight(p_o)))
    rows.append(_check("underparam_weight_vs_lstsq", worst_u, 1e-8))
    rows.append(_check("overparam_weight_vs_minnorm", worst_o, 1e-8))

    # noiseless recovery
    p0 = make_problem(n=40, d=6, sigma=0.0, seed=3)
    rows.append(_check("noiseless_zero_spurious_weight",
                       abs(underparam_spurious_weight(p0)), 1e-10))

    # generalization gap direction under noise
    p = make_problem(n=30, d=8, sigma=1.0, seed=4)
    l_s, l_c = generalization_gap(p, n_test=500, draws=100, seed=5)
    rows.append(_check("noise_gap_ls_minus_lc", max(0.0, l_c - l_s), 1e-12))
    return rows
