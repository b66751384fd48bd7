"""Finite-horizon backward induction on a discretized belief simplex.

Stage tables hold cost-to-go values on a simplex grid; off-grid evaluation
interpolates (linear for 2 states, barycentric on a Kuhn triangulation for
more). The expected-future-cost integral is an expectation of the next
table under the predictive observation mixture: per-component Gauss-Hermite
for scalar observations, seeded Sobol sampling for vector ones, and a plain
table lookup at the predicted belief when there is no observation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .errors import GridTooLarge, NotTwoState, QuadratureUnstable, ValidationError
from .model import MarkovChain
from .cost import cost_grid

_GRID_CAP = 2_000_000


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True, eq=False)
class BeliefGrid:
    """Regular simplex grid: compositions of `resolution` into n parts."""

    n: int
    resolution: int
    comps: np.ndarray       # (m, n) integer compositions, lexicographic
    points: np.ndarray      # comps / resolution

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def _index(self) -> dict[tuple[int, ...], int]:
        idx = getattr(self, "_index_cache", None)
        if idx is None:
            idx = {tuple(c): i for i, c in enumerate(self.comps.tolist())}
            object.__setattr__(self, "_index_cache", idx)
        return idx

    def lookup(self, comp: tuple[int, ...]) -> int | None:
        return self._index().get(comp)


def _compositions(total: int, parts: int):
    out = []

    def rec(prefix, remaining):
        if len(prefix) == parts - 1:
            out.append(prefix + (remaining,))
            return
        for c in range(remaining + 1):
            rec(prefix + (c,), remaining - c)

    rec((), total)
    return out


def build_grid(n: int, resolution: int, cap: int = _GRID_CAP) -> BeliefGrid:
    """Simplex grid with the given number of subdivisions per edge."""
    if n < 2:
        raise ValidationError("need at least 2 states")
    if resolution < 2:
        raise ValidationError("resolution must give at least 3 points per edge")
    count = math.comb(resolution + n - 1, n - 1)
    if count > cap:
        raise GridTooLarge(f"{count} grid points exceeds the cap {cap}")
    comps = np.array(_compositions(resolution, n), dtype=np.int64)
    return BeliefGrid(n=n, resolution=resolution, comps=comps,
                      points=comps.astype(float) / resolution)


@dataclass(frozen=True, eq=False)
class ValueTable:
    stage: int
    values: np.ndarray
    grid: BeliefGrid


@dataclass(frozen=True, eq=False)
class PolicyTable:
    stage: int
    choice: np.ndarray      # control id per grid point
    grid: BeliefGrid


@dataclass(frozen=True)
class QuadratureSpec:
    """Integration settings for the expected-future-cost step."""

    scalar_order: int = 64
    vector_samples: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.scalar_order < 8:
            raise ValidationError("scalar_order must be >= 8")
        if self.vector_samples < 256:
            raise ValidationError("vector_samples must be >= 256")


# ---------------------------------------------------------------------------
# interpolation


def simplex_weights(grid: BeliefGrid, p):
    """Barycentric interpolation weights for one belief.

    Returns (indices, weights, used_fallback). Exact on linear functions.
    For n >= 3 the containing cell comes from the Kuhn triangulation in
    tail-sum coordinates; if a positively weighted vertex is somehow absent
    from the grid the nearest grid vertex is used instead and flagged.
    """
    p = np.asarray(p, dtype=float).reshape(-1)
    n, d = grid.n, grid.resolution
    if n == 2:
        x = min(max(p[0] * d, 0.0), float(d))
        lo = min(int(math.floor(x)), d - 1)
        f = x - lo
        return np.array([lo, lo + 1]), np.array([1.0 - f, f]), False

    tail = np.cumsum(p[::-1])[::-1]            # tail[j] = sum_{i>=j} p_i
    u = tail[1:]                               # decreasing, length n-1
    x = np.clip(u * d, 0.0, float(d))
    base = np.minimum(np.floor(x).astype(np.int64), d)
    f = x - base
    order = np.argsort(-f, kind="stable")
    verts = [base.copy()]
    v = base.copy()
    for j in order[:-1]:
        v = v.copy()
        v[j] += 1
        verts.append(v)
    v = v.copy()
    v[order[-1]] += 1
    verts.append(v)
    fs = f[order]
    weights = np.empty(n)
    weights[0] = 1.0 - fs[0]
    weights[1:-1] = fs[:-1] - fs[1:]
    weights[-1] = fs[-1]

    idxs, wts = [], []
    fallback = False
    for vert, w in zip(verts, weights):
        if w <= 1e-15:
            continue
        comp = _tailsums_to_comp(vert, d)
        hit = grid.lookup(comp)
        if hit is None:
            fallback = True
            hit = nearest_index(grid, p)
            return np.array([hit]), np.array([1.0]), True
        idxs.append(hit)
        wts.append(w)
    wts = np.array(wts)
    return np.array(idxs), wts / wts.sum(), fallback


def _tailsums_to_comp(v, d: int) -> tuple[int, ...]:
    parts = [int(d - v[0])]
    parts.extend(int(v[j - 1] - v[j]) for j in range(1, len(v)))
    parts.append(int(v[-1]))
    return tuple(parts)


def nearest_index(grid: BeliefGrid, p) -> int:
    """Index of the grid point nearest to p (rounded composition)."""
    p = np.asarray(p, dtype=float).reshape(-1)
    d = grid.resolution
    if grid.n == 2:
        return int(round(min(max(p[0], 0.0), 1.0) * d))
    scaled = p * d
    comp = np.floor(scaled).astype(np.int64)
    rem = scaled - comp
    short = d - comp.sum()
    if short > 0:
        for j in np.argsort(-rem, kind="stable")[:short]:
            comp[j] += 1
    elif short < 0:
        for j in np.argsort(rem, kind="stable")[:-short]:
            comp[j] -= 1
    hit = grid.lookup(tuple(comp.tolist()))
    if hit is not None:
        return hit
    return int(np.argmin(np.abs(grid.points - p).sum(axis=1)))


def interpolate_value(table: ValueTable, p) -> float:
    idxs, wts, _ = simplex_weights(table.grid, p)
    return float(table.values[idxs] @ wts)


def _interp_batch(table: ValueTable, pts: np.ndarray) -> np.ndarray:
    """Interpolate many beliefs; pts has shape (..., n)."""
    grid = table.grid
    if grid.n == 2:
        return np.interp(pts[..., 0], grid.points[:, 0], table.values)
    flat = pts.reshape(-1, grid.n)
    out = np.empty(flat.shape[0])
    for i, p in enumerate(flat):
        out[i] = interpolate_value(table, p)
    return out.reshape(pts.shape[:-1])


# ---------------------------------------------------------------------------
# expected future cost


@lru_cache(maxsize=16)
def _hermgauss(order: int):
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    return nodes, weights / math.sqrt(math.pi)


def _log_norm_scalar(y: np.ndarray, mean: float, var: float) -> np.ndarray:
    return -0.5 * ((y - mean) ** 2 / var + math.log(2.0 * math.pi * var))


def _expectation_grid(chain: MarkovChain, pts: np.ndarray, kernels,
                      table: ValueTable, quad: QuadratureSpec) -> np.ndarray:
    """E{next-table value at the updated predicted belief} for many beliefs."""
    pts = np.atleast_2d(pts)
    m, n = pts.shape
    d = kernels[0].dim

    if d == 0:
        preds = pts @ chain.trans.T
        return _interp_batch(table, preds)

    if d == 1:
        nodes, weights = _hermgauss(quad.scalar_order)
        q = quad.scalar_order
        means = np.array([float(k.mean[0]) for k in kernels])
        variances = np.array([float(k.cov[0, 0]) for k in kernels])
        if (variances <= 0).any():
            raise QuadratureUnstable("zero-variance scalar kernel in quadrature")
        # observation nodes per mixture component: y[i, j]
        y = means[:, None] + np.sqrt(2.0 * variances)[:, None] * nodes[None, :]
        yflat = y.reshape(-1)                          # nq
        ll = np.stack([_log_norm_scalar(yflat, means[s], variances[s]) for s in range(n)])
        ll -= ll.max(axis=0, keepdims=True)
        lik = np.exp(ll)                               # n x nq
        w = pts[:, :, None] * lik[None, :, :]          # m x n x nq
        z = w.sum(axis=1)
        if (z <= 0.0).any():
            raise QuadratureUnstable("all state likelihoods underflowed at a node")
        filtered = w / z[:, None, :]
        preds = np.einsum("ab,mbq->maq", chain.trans, filtered)
        vals = _interp_batch(table, np.moveaxis(preds, 1, 2))   # m x nq
        node_w = (pts[:, :, None] * weights[None, None, :]).reshape(m, -1)
        return (vals * node_w).sum(axis=1)

    # vector observations: seeded scrambled Sobol over the mixture
    s_count = quad.vector_samples
    sob = qmc.Sobol(d + 1, scramble=True, seed=quad.seed)
    u = sob.random(s_count)
    z = ndtri(np.clip(u[:, 1:], 1e-12, 1.0 - 1e-12))   # s x d
    means = np.stack([k.mean for k in kernels])
    chols = []
    for k in kernels:
        try:
            chols.append(np.linalg.cholesky(k.cov))
        except np.linalg.LinAlgError:
            w_eig, v_eig = np.linalg.eigh(k.cov)
            chols.append(v_eig @ np.diag(np.sqrt(np.clip(w_eig, 0.0, None))))
    chols = np.stack(chols)
    inv_factors = []
    logdets = []
    for k in kernels:
        cov = k.cov + 1e-10 * np.eye(d)
        inv_factors.append(np.linalg.inv(cov))
        logdets.append(np.linalg.slogdet(cov)[1])
    inv_factors = np.stack(inv_factors)
    logdets = np.array(logdets)

    out = np.empty(m)
    for g in range(m):
        p = pts[g]
        cdf = np.cumsum(p)
        comp = np.searchsorted(cdf, u[:, 0] * cdf[-1], side="right")
        comp = np.clip(comp, 0, n - 1)
        y = means[comp] + np.einsum("sab,sb->sa", chols[comp], z)
        resid = y[:, None, :] - means[None, :, :]       # s x n x d
        quad_forms = np.einsum("sna,nab,snb->sn", resid, inv_factors, resid)
        ll = -0.5 * (quad_forms + logdets[None, :] + d * math.log(2.0 * math.pi))
        ll -= ll.max(axis=1, keepdims=True)
        w = p[None, :] * np.exp(ll)
        tot = w.sum(axis=1)
        if (tot <= 0.0).any():
            raise QuadratureUnstable("all state likelihoods underflowed at a sample")
        preds = (w / tot[:, None]) @ chain.trans.T
        out[g] = _interp_batch(table, preds).mean()
    return out


def expected_future_cost(chain: MarkovChain, prediction, kernels,
                         table: ValueTable, quad: QuadratureSpec) -> float:
    """Expected next-stage cost-to-go after one observation under one control."""
    p = np.asarray(prediction, dtype=float).reshape(-1)
    return float(_expectation_grid(chain, p[None, :], kernels, table, quad)[0])


# ---------------------------------------------------------------------------
# backward induction


def backward_induction(scenario, grid: BeliefGrid, quad: QuadratureSpec):
    """Solve the finite-horizon problem on the grid.

    Returns (value tables, policy tables), both as lists indexed stage-1
    (entry 0 is stage 1). Ties in the minimizing control go to the lowest id.
    """
    horizon = scenario.horizon
    pts = grid.points
    n_controls = len(scenario.controls)
    values_by_stage: dict[int, ValueTable] = {}
    policies_by_stage: dict[int, PolicyTable] = {}

    stage_costs = np.stack([
        cost_grid(pts, scenario.kernels[uid], scenario.lam,
                  scenario.controls[uid].cost, check=True)
        for uid in range(n_controls)
    ])

    for stage in range(horizon, 0, -1):
        if stage == horizon:
            totals = stage_costs
        else:
            nxt = values_by_stage[stage + 1]
            totals = np.empty_like(stage_costs)
            for uid in range(n_controls):
                future = _expectation_grid(scenario.chain, pts,
                                           scenario.kernels[uid], nxt, quad)
                totals[uid] = stage_costs[uid] + future
        choice = totals.argmin(axis=0)
        values_by_stage[stage] = ValueTable(stage=stage,
                                            values=totals.min(axis=0), grid=grid)
        policies_by_stage[stage] = PolicyTable(stage=stage,
                                               choice=choice.astype(np.int64), grid=grid)

    stages = range(1, horizon + 1)
    return [values_by_stage[k] for k in stages], [policies_by_stage[k] for k in stages]


# ---------------------------------------------------------------------------
# structure extraction and checks


@dataclass(frozen=True, eq=False)
class ThresholdReport:
    """Contiguous-interval compression of a 2-state policy."""

    stage: int
    intervals: tuple[tuple[float, float, int], ...]   # (p_low, p_high, control id)
    noncontiguous: tuple[int, ...]                    # controls with split regions


def extract_thresholds(policy: PolicyTable) -> ThresholdReport:
    if policy.grid.n != 2:
        raise NotTwoState("threshold extraction needs a 2-state grid")
    xs = policy.grid.points[:, 0]
    choice = policy.choice
    intervals = []
    start = 0
    for i in range(1, len(choice) + 1):
        if i == len(choice) or choice[i] != choice[start]:
            intervals.append((float(xs[start]), float(xs[i - 1]), int(choice[start])))
            start = i
    seen: dict[int, int] = {}
    for _, _, cid in intervals:
        seen[cid] = seen.get(cid, 0) + 1
    split = tuple(sorted(cid for cid, cnt in seen.items() if cnt > 1))
    return ThresholdReport(stage=policy.stage, intervals=tuple(intervals),
                           noncontiguous=split)


@dataclass(frozen=True, eq=False)
class ConcavityReport:
    passed: bool
    max_second_diff: float
    location: tuple[int, ...]
    tolerance: float
    advisory: bool


def check_concavity(table: ValueTable) -> ConcavityReport:
    """Second-difference concavity test along grid lines.

    Concavity means every interior second difference is <= 0; PASS allows a
    slack of 1e-6 relative to the table's magnitude. For 3+ states the check
    runs along every between-coordinates edge direction and the result is
    advisory.
    """
    values = table.values
    tol = 1e-6 * max(1.0, float(np.abs(values).max()))
    grid = table.grid
    if grid.n == 2:
        if len(values) < 3:
            return ConcavityReport(True, -math.inf, (), tol, False)
        second = values[:-2] - 2.0 * values[1:-1] + values[2:]
        worst = int(second.argmax())
        return ConcavityReport(bool(second.max() <= tol), float(second.max()),
                               (worst + 1,), tol, False)

    worst_val = -math.inf
    worst_loc: tuple[int, ...] = ()
    for idx, comp in enumerate(grid.comps.tolist()):
        for i in range(grid.n):
            for j in range(i + 1, grid.n):
                up = list(comp)
                up[i] += 1
                up[j] -= 1
                down = list(comp)
                down[i] -= 1
                down[j] += 1
                a = grid.lookup(tuple(up))
                b = grid.lookup(tuple(down))
                if a is None or b is None:
                    continue
                second = values[a] - 2.0 * values[idx] + values[b]
                if second > worst_val:
                    worst_val = float(second)
                    worst_loc = tuple(comp)
    return ConcavityReport(bool(worst_val <= tol), worst_val, worst_loc, tol, True)
