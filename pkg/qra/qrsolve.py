"""
Quantile regression solver kernels.

Three kernels share one problem type:
    solve_qr           exact pinball minimization as a linear program
    solve_qr_l1        the same LP with an L1 penalty on the weights (LQRA core)
    solve_qr_smoothed  Gaussian convolution-smoothed check loss (SQRA core)

The LPs are solved with HiGHS through scipy.optimize.linprog, which is
deterministic for a given input. Among several optimal coefficient vectors the
one with the smallest Euclidean norm is returned: the optimal face is read off
the dual and searched with SLSQP.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse
from scipy.optimize import linprog, minimize
from scipy.stats import norm

from qra.core import pinball_loss, quantile_level, validate_finite
from qra.errors import DimensionMismatch, NotConverged, ParamError, RankDeficient, ValidationError
from qra.log import get_logger

logger = get_logger(__name__)

LP_METHOD_DEFAULT = "highs"
DUALITY_GAP_TOL = 1e-8
TIE_TOL = 1e-9
SMOOTH_GTOL_DEFAULT = 1e-8
SMOOTH_MAXITER_DEFAULT = 500
BANDWIDTH_FLOOR = 0.05
L1_LAMBDA_GRID = tuple(2.0**i for i in range(-10, 7))


@dataclass(frozen=True)
class QrProblem:
    """
    One quantile regression: regress y on X at level k.

    Attributes:
        X (np.ndarray): n x m regressors (without an intercept column).
        y (np.ndarray): n responses.
        k (float): Quantile level.
        include_intercept (bool): Prepend a column of ones.
    """

    X: np.ndarray
    y: np.ndarray
    k: float
    include_intercept: bool = True

    def __post_init__(self):
        X = validate_finite(self.X, "regressors")
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        y = validate_finite(self.y, "responses").reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise DimensionMismatch(
                f"{X.shape[0]} regressor rows vs {y.shape[0]} responses")
        if X.shape[0] < X.shape[1] + 1:
            raise ValidationError(
                f"need at least {X.shape[1] + 1} rows for {X.shape[1]} regressors, "
                f"got {X.shape[0]}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "k", quantile_level(self.k))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def m(self):
        return self.X.shape[1]

    def design(self):
        """Returns X with the intercept column prepended when enabled."""
        if self.include_intercept:
            return np.column_stack([np.ones(self.n), self.X])
        return self.X


@dataclass(frozen=True)
class SolverDiagnostics:
    iterations: int
    objective_value: float
    converged: bool
    method: str = ""
    pinball_value: float = None

    def __post_init__(self):
        if self.pinball_value is None:
            object.__setattr__(self, "pinball_value", self.objective_value)


@dataclass(frozen=True)
class QrCoefficients:
    """Fitted beta_k: intercept plus one weight per regressor."""

    intercept: float
    weights: tuple
    k: float
    solver_diagnostics: SolverDiagnostics = field(
        default_factory=lambda: SolverDiagnostics(0, 0.0, True))

    def __post_init__(self):
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @property
    def objective_value(self):
        return self.solver_diagnostics.objective_value

    @property
    def converged(self):
        return self.solver_diagnostics.converged

    def predict(self, X):
        return predict_quantile(self, X)

    def to_dict(self):
        diag = self.solver_diagnostics
        return {
            "k": self.k,
            "intercept": self.intercept,
            "weights": list(self.weights),
            "iterations": diag.iterations,
            "objective_value": diag.objective_value,
            "pinball_value": diag.pinball_value,
            "converged": diag.converged,
            "method": diag.method,
        }

    @classmethod
    def from_dict(cls, data):
        diag = SolverDiagnostics(data["iterations"], data["objective_value"],
                                 data["converged"], data.get("method", ""),
                                 data.get("pinball_value"))
        return cls(data["intercept"], tuple(data["weights"]), data["k"], diag)


@dataclass(frozen=True)
class L1Penalty:
    lambda_l1: float = 0.0
    penalize_intercept: bool = False

    def __post_init__(self):
        if not self.lambda_l1 >= 0:
            raise ParamError(f"lambda_l1 must be >= 0, got {self.lambda_l1}")


@dataclass(frozen=True)
class SmoothingBandwidth:
    """Either a fixed bandwidth h or the rule-of-thumb rule."""

    h: float = None
    rule: str = "rule_of_thumb"
    kernel: str = "gaussian"

    def __post_init__(self):
        if self.h is not None and not self.h > 0:
            raise ParamError(f"bandwidth must be positive, got {self.h}")
        if self.kernel != "gaussian":
            raise ParamError(f"unsupported kernel '{self.kernel}'")
        if self.h is None and self.rule != "rule_of_thumb":
            raise ParamError(f"unknown bandwidth rule '{self.rule}'")

    def resolve(self, residuals):
        """
        Returns the bandwidth to use.

        rule_of_thumb: max(0.05, std(residuals) * n^(-1/5)), residuals taken from a
        preliminary exact fit.
        """
        if self.h is not None:
            return float(self.h)
        r = np.asarray(residuals, dtype=float)
        sigma = float(np.std(r, ddof=1)) if r.size > 1 else 0.0
        return max(BANDWIDTH_FLOOR, sigma * r.size**(-0.2))


@dataclass(frozen=True)
class SolverOptions:
    """
    Attributes:
        tie_break (bool): Run the minimum-norm stage on the optimal face.
        lp_method (str): linprog method name.
        smooth_gtol (float): Gradient tolerance of the smoothed solve, on the
            per-observation mean objective.
    """

    tie_break: bool = True
    lp_method: str = LP_METHOD_DEFAULT
    smooth_gtol: float = SMOOTH_GTOL_DEFAULT
    smooth_maxiter: int = SMOOTH_MAXITER_DEFAULT


DEFAULT_OPTIONS = SolverOptions()


def pinball_objective(D, y, beta, k):
    """Sum of pinball losses of the residuals y - D beta."""
    return float(np.sum(pinball_loss(k, y - D @ beta)))


def _check_rank(D):
    rank = np.linalg.matrix_rank(D)
    if rank < D.shape[1]:
        raise RankDeficient(
            f"design matrix has rank {rank} < {D.shape[1]} columns (collinear features)")


def _solve_lp(D, y, k, penalty_weights, options):
    """
    Solves min k*sum(u+) + (1-k)*sum(u-) + sum_j w_j |beta_j|
    s.t. D beta + u+ - u- = y, u+/- >= 0.

    beta is split into beta+ - beta- so the penalty and the tie-break stage can
    use the same variable layout.

    Returns:
        tuple: (beta, iterations)
    """
    n, p = D.shape
    eye = sparse.identity(n, format="csr")
    Ds = sparse.csr_matrix(D)
    A_eq = sparse.hstack([Ds, -Ds, eye, -eye], format="csr")
    cost = np.concatenate([penalty_weights, penalty_weights,
                           np.full(n, k), np.full(n, 1.0 - k)])
    maxiter = 10 * (n + p)
    res = linprog(cost,
                  A_eq=A_eq,
                  b_eq=y,
                  bounds=(0, None),
                  method=options.lp_method,
                  options={"maxiter": maxiter,
                           "primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise NotConverged(f"LP solver stopped: {res.message}", level=k)
    iterations = int(getattr(res, "nit", 0) or 0)
    x = res.x
    beta = x[:p] - x[p:2 * p]

    if options.tie_break:
        reduced = getattr(getattr(res, "lower", None), "marginals", None)
        if reduced is None:
            logger.debug(f"tie-break stage skipped at k={k:g}: no reduced costs")
        else:
            optimum = float(res.fun)
            candidate = _min_norm_on_face(D, y, beta, np.asarray(reduced),
                                          TIE_TOL * (1.0 + float(np.max(cost))))
            value = float(np.sum(pinball_loss(k, y - D @ candidate)) +
                          penalty_weights @ np.abs(candidate))
            if value <= optimum + DUALITY_GAP_TOL * (1.0 + abs(optimum)):
                beta = candidate
            else:
                logger.debug(f"tie-break candidate left the optimal face at k={k:g}")

    return beta, iterations


def _min_norm_on_face(D, y, beta, reduced, tol):
    """
    Smallest Euclidean norm beta among all LP optima.

    Complementary slackness with the solver's dual holds every variable with a
    positive reduced cost at zero, which leaves the optimal set as a polyhedron
    in beta alone: sign conditions on residuals and weights. Equality rows are
    eliminated through their null space and SLSQP handles the rest.

    Parameters:
        D (np.ndarray): n x p design.
        y (np.ndarray): n responses.
        beta (np.ndarray): An optimal coefficient vector.
        reduced (np.ndarray): Reduced costs of (beta+, beta-, u+, u-).
        tol (float): Reduced costs above this pin their variable at zero.

    Returns:
        np.ndarray
    """
    n, p = D.shape
    fixed = reduced > tol
    pos, neg = fixed[:p], fixed[p:2 * p]
    up, down = fixed[2 * p:2 * p + n], fixed[2 * p + n:]
    eye = np.eye(p)

    # u+ = 0 means D beta >= y, u- = 0 means D beta <= y
    E = np.vstack([D[up & down], eye[pos & neg]])
    e = np.concatenate([y[up & down], np.zeros(int(np.sum(pos & neg)))])
    G = np.vstack([D[up & ~down], -D[down & ~up], -eye[pos & ~neg], eye[neg & ~pos]])
    h = np.concatenate([y[up & ~down], -y[down & ~up],
                        np.zeros(int(np.sum(pos & ~neg)) + int(np.sum(neg & ~pos)))])

    basis = linalg.null_space(E) if E.shape[0] else eye
    if basis.shape[1] == 0:
        return beta
    # closest point to the origin on the affine hull; orthogonal to the basis
    anchor = beta - basis @ (basis.T @ beta)
    slack = tol * (1.0 + np.abs(h))
    if G.shape[0] == 0 or np.all(G @ anchor >= h - slack):
        return anchor

    GN = G @ basis
    res = minimize(lambda z: 0.5 * float(z @ z),
                   basis.T @ beta,
                   jac=lambda z: z,
                   method="SLSQP",
                   constraints=[{"type": "ineq",
                                 "fun": lambda z: G @ anchor + GN @ z - h,
                                 "jac": lambda z: GN}],
                   options={"ftol": 1e-14, "maxiter": 200})
    if not res.success:
        logger.debug(f"minimum-norm stage did not converge: {res.message}")
        return beta
    return anchor + basis @ res.x


def _coefficients(problem, beta, iterations, method, objective=None):
    D = problem.design()
    pinball = pinball_objective(D, problem.y, beta, problem.k)
    if problem.include_intercept:
        intercept, weights = beta[0], beta[1:]
    else:
        intercept, weights = 0.0, beta
    diag = SolverDiagnostics(iterations,
                             pinball if objective is None else objective,
                             True, method, pinball)
    return QrCoefficients(intercept, tuple(weights), problem.k, diag)


def solve_qr(problem, options=DEFAULT_OPTIONS):
    """
    Exact quantile regression: minimizes sum_i rho_k(y_i - x_i beta).

    Parameters:
        problem (QrProblem): Data and level.
        options (SolverOptions): LP settings.

    Returns:
        QrCoefficients: Converged fit; objective_value is the pinball sum.
    """
    D = problem.design()
    _check_rank(D)
    beta, iterations = _solve_lp(D, problem.y, problem.k, np.zeros(D.shape[1]),
                                 options)
    return _coefficients(problem, beta, iterations, "lp")


def solve_qr_l1(problem, penalty=L1Penalty(), options=DEFAULT_OPTIONS):
    """
    L1-penalized quantile regression:
    minimizes sum_i rho_k(y_i - x_i beta) + lambda * sum_j |beta_j|.

    Regressor columns are standardized before penalizing (centered as well when an
    intercept is fitted) and the coefficients are mapped back to the raw scale.
    The reported objective is the penalized one on the standardized scale.

    Parameters:
        problem (QrProblem): Data and level.
        penalty (L1Penalty): lambda and whether the intercept is penalized.
        options (SolverOptions): LP settings.

    Returns:
        QrCoefficients
    """
    X = problem.X
    mean = X.mean(axis=0) if problem.include_intercept else np.zeros(problem.m)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Xs = (X - mean) / scale
    if problem.include_intercept:
        D = np.column_stack([np.ones(problem.n), Xs])
    else:
        D = Xs
    _check_rank(D)

    weights = np.full(D.shape[1], penalty.lambda_l1)
    if problem.include_intercept and not penalty.penalize_intercept:
        weights[0] = 0.0
    beta_s, iterations = _solve_lp(D, problem.y, problem.k, weights, options)
    objective = pinball_objective(D, problem.y, beta_s, problem.k) + \
        float(weights @ np.abs(beta_s))

    if problem.include_intercept:
        w = beta_s[1:] / scale
        beta = np.concatenate([[beta_s[0] - mean @ w], w])
    else:
        beta = beta_s / scale
    return _coefficients(problem, beta, iterations, "lp_l1", objective)


def smoothed_loss(u, k, h):
    """
    Gaussian convolution-smoothed check loss
    l_{k,h}(u) = u * (k - Phi(-u/h)) + h * phi(u/h).
    """
    u = np.asarray(u, dtype=float)
    z = u / h
    return u * (k - norm.cdf(-z)) + h * norm.pdf(z)


def smoothed_loss_grad(u, k, h):
    """Derivative of smoothed_loss in u: k - Phi(-u/h)."""
    return k - norm.cdf(-np.asarray(u, dtype=float) / h)


def solve_qr_smoothed(problem, bw=SmoothingBandwidth(), options=DEFAULT_OPTIONS):
    """
    Smoothed quantile regression: minimizes sum_i l_{k,h}(y_i - x_i beta).

    The objective is smooth and convex. It is minimized with a trust-region
    Newton method using the analytic gradient -D'(k - Phi(-u/h)) and Hessian
    D' diag(phi(u/h)/h) D, warm-started from the exact fit (which also feeds the
    rule-of-thumb bandwidth).

    Parameters:
        problem (QrProblem): Data and level.
        bw (SmoothingBandwidth): Fixed h or rule.
        options (SolverOptions): Tolerances.

    Returns:
        QrCoefficients: objective_value is the smoothed sum, pinball_value the
        plain pinball sum at the smoothed solution.
    """
    exact = solve_qr(problem, options)
    D = problem.design()
    y, k, n = problem.y, problem.k, problem.n
    beta0 = np.array(([exact.intercept] if problem.include_intercept else []) +
                     list(exact.weights))
    h = bw.resolve(y - D @ beta0)

    def fun(beta):
        u = y - D @ beta
        value = float(np.sum(smoothed_loss(u, k, h))) / n
        grad = -(D.T @ smoothed_loss_grad(u, k, h)) / n
        return value, grad

    def hess(beta):
        u = y - D @ beta
        w = norm.pdf(u / h) / h
        return (D.T * w) @ D / n

    res = minimize(fun,
                   beta0,
                   jac=True,
                   hess=hess,
                   method="trust-exact",
                   options={"gtol": options.smooth_gtol,
                            "maxiter": options.smooth_maxiter})
    _, grad = fun(res.x)
    grad_norm = float(np.max(np.abs(grad)))
    if grad_norm > options.smooth_gtol:
        raise NotConverged(
            f"smoothed solver stopped with gradient norm {grad_norm:.3g}: "
            f"{res.message}", level=k)
    objective = float(np.sum(smoothed_loss(y - D @ res.x, k, h)))
    coeffs = _coefficients(problem, res.x, int(res.nit), f"smoothed(h={h:.6g})",
                           objective)
    return coeffs


def predict_quantile(coeffs, x_row):
    """
    Evaluates intercept + x . weights.

    Parameters:
        coeffs (QrCoefficients): Fitted model.
        x_row (array-like): One row of m regressors, or an n x m matrix.

    Returns:
        float or np.ndarray
    """
    x = np.asarray(x_row, dtype=float)
    w = np.asarray(coeffs.weights, dtype=float)
    width = x.shape[-1] if x.ndim else 1
    if width != w.size:
        raise DimensionMismatch(f"expected {w.size} regressors, got {width}")
    out = coeffs.intercept + x @ w
    return float(out) if np.ndim(out) == 0 else out
