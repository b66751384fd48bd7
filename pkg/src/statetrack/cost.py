"""One-stage trade-off cost in all its forms, plus the structural results.

The current cost of a control at a predicted belief is
(1 - lam) * expected posterior trace MSE + lam * sensing cost. It is always
computed through two independent algebraic routes (a per-state h-vector and
a trace identity) which must agree to 1e-10; the trace value is returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateKernel,
    HypothesisViolated,
    NotTwoStateScalar,
    SingularInnovation,
)
from .model import Control

_DUAL_TOL = 1e-10
_CASE_TOL = 1e-12
_GRID_POINTS = 1001


# ---------------------------------------------------------------------------
# batched dual-form evaluation


def _batched_solve(s_mats, rhs):
    """Solve s_mats @ x = rhs per batch entry, with one jitter retry."""
    try:
        return np.linalg.solve(s_mats, rhs)
    except np.linalg.LinAlgError:
        d = s_mats.shape[-1]
        try:
            return np.linalg.solve(s_mats + 1e-10 * np.eye(d), rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularInnovation(f"innovation covariance not invertible: {exc}") from exc


def cost_grid(points, kernels, lam: float, cost: float, check: bool = True) -> np.ndarray:
    """Current cost of one control at many beliefs at once.

    points: (m, n) array of beliefs. Returns (m,) costs. With check=True the
    h-vector route is evaluated alongside the trace route and the two are
    required to agree within 1e-10.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m, n = pts.shape
    d = kernels[0].dim
    trace_sigma = 1.0 - np.einsum("mi,mi->m", pts, pts)
    if d == 0:
        return (1.0 - lam) * trace_sigma + lam * cost

    mat = np.column_stack([k.mean for k in kernels])          # d x n
    qstack = np.stack([k.cov for k in kernels])               # n x d x d
    qmix = np.einsum("mi,iab->mab", pts, qstack)              # m x d x d
    ybar = pts @ mat.T                                        # m x d
    # M Sigma = M diag(p) - (M p) p'
    msig = mat[None, :, :] * pts[:, None, :] - ybar[:, :, None] * pts[:, None, :]
    s_mats = msig @ mat.T + qmix                              # m x d x d
    s_mats = 0.5 * (s_mats + np.swapaxes(s_mats, 1, 2))
    x = _batched_solve(s_mats, msig)                          # S^{-1} M Sigma
    reduction = np.einsum("mdn,mdn->m", msig, x)
    trace_form = (1.0 - lam) * (trace_sigma - reduction) + lam * cost

    if check:
        gain = np.swapaxes(x, 1, 2)                           # m x n x d
        gtg = np.einsum("mnd,mne->mde", gain, gain)
        tr_gq = np.einsum("mde,ide->mi", gtg, qstack)
        diff = mat.T[None, :, :] - ybar[:, None, :]           # m x n x d
        shifted = pts[:, None, :] + np.einsum("mnd,mid->min", gain, diff)
        norms = np.einsum("min,min->mi", shifted, shifted)
        h = 1.0 - tr_gq - norms
        h_form = (1.0 - lam) * np.einsum("mi,mi->m", pts, h) + lam * cost
        gap = np.abs(h_form - trace_form).max()
        if gap > _DUAL_TOL:
            raise AssertionError(f"cost route disagreement {gap} > {_DUAL_TOL}")
    return trace_form


def current_cost(prediction, control: Control, kernels, lam: float) -> float:
    """Trade-off cost of one control at one predicted belief (dual-route checked)."""
    return float(cost_grid(np.asarray(prediction, dtype=float)[None, :],
                           kernels, lam, control.cost, check=True)[0])


class CostEvaluator:
    """Precomputed batched cost evaluation over a whole control set.

    Groups controls by observation dimension so one belief's costs for all
    controls come out of a handful of batched solves. Used by the myopic
    strategy; the per-call dual-route check lives in current_cost.
    """

    def __init__(self, scenario):
        self.scenario = scenario
        self.n = scenario.n
        self.costs = np.array([u.cost for u in scenario.controls])
        self.groups = {}
        for idx in range(len(scenario.controls)):
            d = scenario.obs_dim(idx)
            self.groups.setdefault(d, []).append(idx)
        self._stacked = {}
        for d, idxs in self.groups.items():
            if d == 0:
                continue
            mats = np.stack([np.column_stack([k.mean for k in scenario.kernels[i]]) for i in idxs])
            qstacks = np.stack([np.stack([k.cov for k in scenario.kernels[i]]) for i in idxs])
            self._stacked[d] = (np.array(idxs), mats, qstacks)

    def trace_terms(self, prediction) -> np.ndarray:
        """Expected posterior trace MSE per control at one belief."""
        p = np.asarray(prediction, dtype=float).reshape(-1)
        tr_sigma = 1.0 - float(p @ p)
        out = np.full(len(self.costs), tr_sigma)
        for d, (idxs, mats, qstacks) in self._stacked.items():
            ybar = mats @ p                                   # g x d
            msig = mats * p[None, None, :] - ybar[:, :, None] * p[None, None, :]
            qmix = np.einsum("gnab,n->gab", qstacks, p)       # qstacks: g x n x d x d
            s_mats = msig @ np.swapaxes(mats, 1, 2) + qmix
            s_mats = 0.5 * (s_mats + np.swapaxes(s_mats, 1, 2))
            x = _batched_solve(s_mats, msig)
            out[idxs] = tr_sigma - np.einsum("gdn,gdn->g", msig, x)
        return out

    def all_costs(self, prediction, lam: float) -> np.ndarray:
        return (1.0 - lam) * self.trace_terms(prediction) + lam * self.costs


# ---------------------------------------------------------------------------
# two-state scalar structure


def _require_two_state_scalar(kernels):
    if len(kernels) != 2 or kernels[0].dim != 1 or kernels[1].dim != 1:
        raise NotTwoStateScalar("needs 2 states and scalar kernels")
    m1, m2 = float(kernels[0].mean[0]), float(kernels[1].mean[0])
    v1, v2 = float(kernels[0].cov[0, 0]), float(kernels[1].cov[0, 0])
    return m1, m2, v1, v2


@dataclass(frozen=True)
class CaseLabel:
    """Mean/variance equality pattern of a 2-state scalar control."""

    variant: str            # "I", "II", "III", or "IV"
    a12: float              # squared mean separation
    variances: tuple[float, float]


def classify_case(control: Control, kernels) -> CaseLabel:
    """Label a scalar control by equality of its per-state means and variances."""
    m1, m2, v1, v2 = _require_two_state_scalar(kernels)
    means_eq = abs(m1 - m2) <= _CASE_TOL
    vars_eq = abs(v1 - v2) <= _CASE_TOL
    if means_eq:
        variant = "I" if vars_eq else "II"
    else:
        variant = "III" if vars_eq else "IV"
    return CaseLabel(variant=variant, a12=(m1 - m2) ** 2, variances=(v1, v2))


def current_cost_2state_scalar(p: float, control: Control, kernels, lam: float) -> float:
    """Closed-form cost for 2 states and a scalar kernel pair.

    p is the first belief coordinate. The estimation term is
    2f - 2 a12 f^2 / (a12 f + v1 p + v2 (1-p)) with f = p (1 - p).
    """
    m1, m2, v1, v2 = _require_two_state_scalar(kernels)
    a12 = (m1 - m2) ** 2
    f = p * (1.0 - p)
    den = a12 * f + v1 * p + v2 * (1.0 - p)
    if den <= 0.0:
        raise DegenerateKernel("zero innovation variance in the closed form")
    est = 2.0 * f - 2.0 * a12 * f * f / den
    return (1.0 - lam) * est + lam * control.cost


def _scalar_cost_curve(control: Control, kernels, lam: float, grid: np.ndarray) -> np.ndarray:
    m1, m2, v1, v2 = _require_two_state_scalar(kernels)
    a12 = (m1 - m2) ** 2
    f = grid * (1.0 - grid)
    den = a12 * f + v1 * grid + v2 * (1.0 - grid)
    if (den <= 0.0).any():
        raise DegenerateKernel("zero innovation variance in the closed form")
    est = 2.0 * f - 2.0 * a12 * f * f / den
    return (1.0 - lam) * est + lam * control.cost


def _dominates_blackwell(ka, kb) -> bool:
    """Sufficient informativeness check: does kernel pair a dominate pair b?

    Certified routes only: equal-mean pairs ordered by per-state variances,
    and equal-variance pairs ordered by squared mean separation. Anything
    else is not certified and returns False.
    """
    m1a, m2a, v1a, v2a = _require_two_state_scalar(ka)
    m1b, m2b, v1b, v2b = _require_two_state_scalar(kb)
    a_means_eq = abs(m1a - m2a) <= _CASE_TOL
    b_means_eq = abs(m1b - m2b) <= _CASE_TOL
    if a_means_eq and b_means_eq:
        return v1a <= v1b + _CASE_TOL and v2a <= v2b + _CASE_TOL
    a_vars_eq = abs(v1a - v2a) <= _CASE_TOL
    b_vars_eq = abs(v1b - v2b) <= _CASE_TOL
    if a_vars_eq and b_vars_eq and abs(v1a - v1b) <= _CASE_TOL:
        return (m1a - m2a) ** 2 >= (m1b - m2b) ** 2 - _CASE_TOL
    return False


def passive_optimal(controls, kernels_by_control, lam: float):
    """The control that is optimal at every belief, when one exists.

    Requires both a certified informativeness dominance over every rival and
    pointwise cost dominance on a dense belief grid; returns None when no
    control passes both.
    """
    grid = np.linspace(0.0, 1.0, _GRID_POINTS)
    curves = [_scalar_cost_curve(u, k, lam, grid) for u, k in zip(controls, kernels_by_control)]
    for i, u in enumerate(controls):
        informative = all(
            _dominates_blackwell(kernels_by_control[i], kernels_by_control[j])
            for j in range(len(controls)) if j != i
        )
        if not informative:
            continue
        cheapest = all(
            (curves[i] <= curves[j] + 1e-12).all()
            for j in range(len(controls)) if j != i
        )
        if cheapest:
            return u
    return None


def case4_crossing(control_a: Control, control_b: Control, kernels_a, kernels_b) -> float:
    """Interior belief where two variance-crossed equal-separation controls tie.

    Preconditions: equal squared mean separations, equal costs, and
    v1a > v1b with v2a < v2b. Below the returned p the first control is the
    cheaper of the two, above it the second.
    """
    m1a, m2a, v1a, v2a = _require_two_state_scalar(kernels_a)
    m1b, m2b, v1b, v2b = _require_two_state_scalar(kernels_b)
    a12a = (m1a - m2a) ** 2
    a12b = (m1b - m2b) ** 2
    if abs(a12a - a12b) > _CASE_TOL:
        raise HypothesisViolated("mean separations differ")
    if abs(control_a.cost - control_b.cost) > _CASE_TOL:
        raise HypothesisViolated("costs differ")
    if not (v1a > v1b + _CASE_TOL and v2a < v2b - _CASE_TOL):
        raise HypothesisViolated("need v1a > v1b and v2a < v2b")
    return (v2b - v2a) / (v1a - v1b + v2b - v2a)
