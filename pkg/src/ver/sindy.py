"""Sparse regression of governing equations on coordinate trajectories.

Fits dz/dt = Theta(z) Xi by sequential thresholded least squares over a
term library, scores candidate equations (R^2, length, fitness), and
integrates discovered equations for extrapolation checks.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import savgol_filter

from . import termlib
from .dynamics import Trajectory, rk4_path
from .errors import (
    DegenerateTargetError,
    InvalidArgumentError,
    SingularDesignError,
)

#: default sparsity weight  (eta in the regression objective)
DEFAULT_ETA = 0.01
#: hard threshold on standardized coefficients
DEFAULT_THRESHOLD = 0.05
#: standardized magnitude above which a coefficient counts toward length
EPS_TERM = 1e-3
#: default length penalty in the fitness score
DEFAULT_GAMMA = 0.02


@dataclass
class DerivativeSeries:
    """dz/dt estimates aligned with the source trajectory."""

    values: np.ndarray
    method: str


@dataclass
class CoefficientMatrix:
    """Xi (k x d): column j holds the coefficients for dz_j/dt.

    ``feature_scales`` are the per-term standardization factors used during
    fitting; the active-term test multiplies them back in so that length
    counting is scale-free.
    """

    values: np.ndarray
    library_ref: str = ""
    feature_scales: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.feature_scales is None:
            self.feature_scales = np.ones(self.values.shape[0])
        else:
            self.feature_scales = np.asarray(self.feature_scales, dtype=float)

    def active_mask(self, eps=EPS_TERM):
        return np.abs(self.values * self.feature_scales[:, None]) > eps

    def n_active(self, eps=EPS_TERM):
        return int(self.active_mask(eps).sum())


@dataclass
class Equation:
    """A discovered governing equation dz/dt = Theta(z) Xi."""

    library: termlib.TermLibrary
    coeffs: CoefficientMatrix
    eta: float = DEFAULT_ETA
    metrics: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.library.dim

    def rhs(self, z):
        theta = termlib.evaluate_library(self.library, np.atleast_2d(z))
        return (theta @ self.coeffs.values)[0]

    def pretty(self):
        lines = []
        for j in range(self.dim):
            parts = [f"{self.coeffs.values[i, j]:+.4g}*{t.text()}"
                     for i, t in enumerate(self.library.terms)
                     if self.coeffs.active_mask()[i, j]]
            lines.append(f"dz{j + 1}/dt = " + (" ".join(parts) if parts else "0"))
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# derivative estimation
# ---------------------------------------------------------------------------

def estimate_derivatives(traj, method="central", window=11, order=3):
    """Estimate dz/dt from a uniformly sampled trajectory.

    ``central``: second-order central differences with one-sided endpoint
    stencils. ``sg``: Savitzky-Golay first derivative with the given
    window and polynomial order.
    """
    steps = np.diff(traj.times)
    if steps.size and not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
        raise InvalidArgumentError("derivative estimation requires uniform dt")
    dt = traj.dt
    if method == "central":
        values = np.gradient(traj.states, dt, axis=0, edge_order=2)
    elif method == "sg":
        if len(traj.states) < max(5, window):
            raise InvalidArgumentError(
                f"need at least {max(5, window)} samples for sg derivatives")
        if window % 2 == 0 or order >= window:
            raise InvalidArgumentError("sg requires odd window and order < window")
        values = savgol_filter(traj.states, window, order, deriv=1, delta=dt,
                               axis=0, mode="interp")
    else:
        raise InvalidArgumentError(f"unknown derivative method {method!r}")
    return DerivativeSeries(values=values, method=method)


# ---------------------------------------------------------------------------
# sparse coefficient optimization
# ---------------------------------------------------------------------------

def _column_scales(design):
    scales = design.std(axis=0)
    rms = np.sqrt(np.mean(design ** 2, axis=0))
    scales = np.where(scales > 1e-12, scales, np.where(rms > 1e-12, rms, 1.0))
    return scales


def _solve(a, b, eta, term_names):
    """Least squares with optional ridge stabilization (lambda = eta)."""
    if eta > 0:
        n = len(a)
        gram = a.T @ a / n + eta * np.eye(a.shape[1])
        return np.linalg.solve(gram, a.T @ b / n)
    w, _, rank, sv = np.linalg.lstsq(a, b, rcond=None)
    if rank < a.shape[1]:
        _, _, vt = np.linalg.svd(a, full_matrices=False)
        null = vt[rank:]
        involved = sorted({term_names[j]
                           for row in null
                           for j in np.nonzero(np.abs(row) > 0.1)[0]})
        raise SingularDesignError(
            f"design matrix is rank-deficient (rank {rank} of {a.shape[1]}); "
            f"collinear terms: {involved}", terms=involved)
    return w


def fit_coefficients(design, derivs, eta=DEFAULT_ETA, threshold=DEFAULT_THRESHOLD,
                     max_rounds=20, term_names=None, support=None):
    """Sequential thresholded least squares on a standardized design matrix.

    Minimizes mean squared residual plus the eta sparsity penalty: each
    round solves a ridge-stabilized least-squares problem (lambda = eta)
    on the current support, zeroes standardized coefficients below
    ``threshold``, and refits until the support is stable (at most
    ``max_rounds`` rounds). The stable support then gets one unpenalized
    refit so surviving coefficients are free of ridge shrinkage; if that
    refit is singular the stabilized values stand. Columns of ``derivs``
    are fit independently.

    ``support`` optionally restricts the fit to a term subset (shape (k,)
    or (k, d) boolean), which is how a nested sparsity path over
    increasing eta is walked: feed each fit the previous active set.
    """
    design = np.asarray(design, dtype=float)
    derivs = np.asarray(derivs, dtype=float)
    if derivs.ndim == 1:
        derivs = derivs[:, None]
    if eta < 0:
        raise InvalidArgumentError("eta must be non-negative")
    n, k = design.shape
    if n <= k:
        warnings.warn(f"underdetermined fit: n={n} samples for k={k} terms")
    if term_names is None:
        term_names = [f"col{j}" for j in range(k)]

    scales = _column_scales(design)
    a_std = design / scales
    d = derivs.shape[1]
    if support is None:
        support0 = np.ones((k, d), dtype=bool)
    else:
        support0 = np.asarray(support, dtype=bool)
        if support0.ndim == 1:
            support0 = np.repeat(support0[:, None], d, axis=1)
    xi = np.zeros((k, d))
    for j in range(d):
        b = derivs[:, j]
        support = support0[:, j].copy()
        w_full = np.zeros(k)
        for _ in range(max_rounds):
            if not support.any():
                break
            idx = np.nonzero(support)[0]
            w = _solve(a_std[:, idx], b, eta, [term_names[i] for i in idx])
            w_full = np.zeros(k)
            w_full[idx] = w
            new_support = np.abs(w_full) >= threshold if threshold > 0 \
                else support.copy()
            new_support &= support
            if np.array_equal(new_support, support):
                break
            support = new_support
        w_full[~support] = 0.0
        if eta > 0 and support.any():
            idx = np.nonzero(support)[0]
            try:
                w_full[idx] = _solve(a_std[:, idx], b, 0.0,
                                     [term_names[i] for i in idx])
            except SingularDesignError:
                pass  # keep the ridge-stabilized values
        xi[:, j] = w_full / scales
    return CoefficientMatrix(values=xi, feature_scales=scales)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def r_squared(pred, actual):
    """Coefficient of determination pooled over all matrix entries."""
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.shape != actual.shape:
        raise InvalidArgumentError(
            f"shape mismatch: pred {pred.shape} vs actual {actual.shape}")
    if pred.ndim == 1:
        pred, actual = pred[:, None], actual[:, None]
    ss_res = float(np.sum((pred - actual) ** 2))
    ss_tot = float(np.sum((actual - actual.mean(axis=0)) ** 2))
    if ss_tot == 0.0:
        raise DegenerateTargetError("target has zero total variance")
    return 1.0 - ss_res / ss_tot


def fitness(r2, length, gamma=DEFAULT_GAMMA):
    """Combined accuracy/parsimony score; higher is better."""
    if gamma < 0:
        raise InvalidArgumentError("gamma must be non-negative")
    return r2 - gamma * length


def assess_fit(library, coeffs, design, derivs, gamma=DEFAULT_GAMMA):
    """Compute (r2, length, fitness) of a fitted coefficient matrix."""
    pred = design @ coeffs.values
    r2 = r_squared(pred, derivs)
    length = coeffs.n_active()
    return {"r2": r2, "length": length, "fitness": fitness(r2, length, gamma)}


# ---------------------------------------------------------------------------
# extrapolation and analysis
# ---------------------------------------------------------------------------

def predict_trajectory(equation, z0, dt, n):
    """Integrate the discovered equation with the same fixed-step RK4 used
    for ground-truth simulation."""
    if not np.all(np.isfinite(equation.coeffs.values)):
        raise InvalidArgumentError("equation has non-finite coefficients")
    states = rk4_path(equation.rhs, z0, dt, n)
    return Trajectory(times=np.arange(n) * dt, states=states)


def linear_eigenvalues(equation):
    """Eigenvalues of a purely linear equation's system matrix."""
    d = equation.dim
    if d > 4:
        raise InvalidArgumentError("eigenvalue analysis supports dim <= 4")
    a = np.zeros((d, d))
    for i, term in enumerate(equation.library.terms):
        if term.funcs or len(term.poly) != 1 or term.poly[0][1] != 1:
            raise InvalidArgumentError(
                f"library term {term.text()} is not linear")
        var = term.poly[0][0]
        a[:, var] = equation.coeffs.values[i, :]
    vals = np.linalg.eigvals(a)
    return sorted(vals, key=lambda z: (round(z.real, 12), round(z.imag, 12)))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def equation_to_dict(equation):
    return {
        "terms": equation.library.texts(),
        "coeffs": equation.coeffs.values.tolist(),
        "eta": equation.eta,
        "r2": equation.metrics.get("r2"),
        "length": equation.metrics.get("length"),
        "fitness": equation.metrics.get("fitness"),
        "feature_scales": equation.coeffs.feature_scales.tolist(),
    }


def equation_from_dict(obj, dim=None):
    terms = obj["terms"]
    if dim is None:
        dim = max(termlib.parse_term(t, 99).max_var() for t in terms) + 1
    library = termlib.make_library(terms, dim)
    coeffs = CoefficientMatrix(
        values=np.array(obj["coeffs"], dtype=float),
        library_ref=termlib.library_signature(library),
        feature_scales=np.array(obj.get("feature_scales",
                                        np.ones(len(terms))), dtype=float))
    metrics = {k: obj[k] for k in ("r2", "length", "fitness") if obj.get(k) is not None}
    return Equation(library=library, coeffs=coeffs,
                    eta=obj.get("eta", DEFAULT_ETA), metrics=metrics)


def write_equation(path, equation):
    with open(path, "w") as fh:
        json.dump(equation_to_dict(equation), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_equation(path, dim=None):
    with open(path) as fh:
        return equation_from_dict(json.load(fh), dim=dim)
