"""Markov chains, sensing controls, and Gaussian observation ensembles.

Conventions used throughout the package:
  * transition matrices are column-stochastic, entry (j, i) = P(next=j | cur=i),
    so one prediction step is the matrix-vector product trans @ p;
  * states are indexed 0..n-1 internally;
  * an observation kernel is a d-dimensional Gaussian per (control, state);
    d = 0 is legal and means "no observation" (likelihood-neutral).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import block_diag, cho_factor, cho_solve, toeplitz

from .errors import (
    BudgetZero,
    CostOutOfRange,
    DimensionMismatch,
    NegativeEntry,
    NonStochastic,
    SingularCovariance,
    ValidationError,
)

_STOCH_TOL = 1e-9
_SYM_TOL = 1e-12
_EIG_TOL = 1e-12
_JITTER = 1e-10


@dataclass(frozen=True, eq=False)
class MarkovChain:
    """Finite-state chain: column-stochastic transition matrix plus prior."""

    trans: np.ndarray
    prior: np.ndarray

    @property
    def n(self) -> int:
        return self.prior.shape[0]


@dataclass(frozen=True, eq=False)
class GaussianKernel:
    """One Gaussian observation kernel: mean vector and covariance matrix."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise DimensionMismatch(f"cov shape {cov.shape} does not match mean length {d}")
        if d:
            if not np.allclose(cov, cov.T, atol=_SYM_TOL, rtol=0.0):
                raise ValidationError("covariance not symmetric")
            w = np.linalg.eigvalsh(cov)
            if w.min(initial=0.0) < -_EIG_TOL:
                raise ValidationError(f"covariance has eigenvalue {w.min()} < -{_EIG_TOL}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov.reshape(d, d))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class Control:
    """A sensing action: integer id, normalized cost, optional allocation."""

    id: int
    cost: float
    allocation: tuple[int, ...] | None = None

    def __post_init__(self):
        if not (-1e-12 <= self.cost <= 1.0 + 1e-12):
            raise CostOutOfRange(f"control {self.id} cost {self.cost} outside [0, 1]")
        if self.allocation is not None:
            alloc = tuple(int(a) for a in self.allocation)
            if any(a < 0 for a in alloc):
                raise NegativeEntry(f"control {self.id} allocation has negative entries")
            object.__setattr__(self, "allocation", alloc)


@dataclass(frozen=True, eq=False)
class SensorSpec:
    """One sensor: per-state AR(1) signal plus white noise, with a reception cost."""

    name: str
    mu: np.ndarray          # per-state mean level
    sigma2: np.ndarray      # per-state AR innovation variance
    phi: float              # AR coefficient
    sigma_z2: float         # additive noise variance
    delta: float            # per-sample reception cost

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).reshape(-1)
        s2 = np.asarray(self.sigma2, dtype=float).reshape(-1)
        if mu.shape != s2.shape:
            raise DimensionMismatch(f"sensor {self.name}: mu and sigma2 lengths differ")
        if abs(self.phi) >= 1.0:
            raise ValidationError(f"sensor {self.name}: |phi| must be < 1")
        if (s2 < 0).any() or self.sigma_z2 < 0:
            raise NegativeEntry(f"sensor {self.name}: negative variance")
        if self.delta <= 0:
            raise ValidationError(f"sensor {self.name}: delta must be > 0")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", s2)


@dataclass(frozen=True, eq=False)
class Scenario:
    """A complete tracking problem: chain, controls, kernels, weight, horizon."""

    chain: MarkovChain
    controls: tuple[Control, ...]
    kernels: tuple[tuple[GaussianKernel, ...], ...]   # [control index][state]
    lam: float
    horizon: int
    # control assumed active before the first decision; None picks the
    # cheapest control that actually observes something
    initial_control: int | None = None
    sensors: tuple[SensorSpec, ...] = ()
    budget: int | None = None
    norm_c: float | None = None
    name: str = ""
    # per-control raw energy (allocation . delta when available, else cost)
    energy: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ValidationError(f"lambda {self.lam} outside [0, 1]")
        if self.horizon < 1:
            raise ValidationError("horizon must be >= 1")
        if len(self.kernels) != len(self.controls):
            raise DimensionMismatch("kernels must cover every control")
        n = self.chain.n
        for u, per_state in zip(self.controls, self.kernels):
            if len(per_state) != n:
                raise DimensionMismatch(f"control {u.id}: kernels must cover every state")
            dims = {k.dim for k in per_state}
            if len(dims) != 1:
                raise DimensionMismatch(f"control {u.id}: kernel dimensions differ across states")
        ids = [u.id for u in self.controls]
        if ids != list(range(len(ids))):
            raise ValidationError("control ids must be 0..len(controls)-1 in order")
        if self.initial_control is None:
            sensing = [u for u, per_state in zip(self.controls, self.kernels)
                       if per_state[0].dim > 0]
            pool = sensing if sensing else list(self.controls)
            pick = min(pool, key=lambda u: (u.cost, u.id))
            object.__setattr__(self, "initial_control", pick.id)
        if not (0 <= self.initial_control < len(self.controls)):
            raise ValidationError(f"initial_control {self.initial_control} is not a control id")
        if not self.energy:
            deltas = np.array([s.delta for s in self.sensors]) if self.sensors else None
            en = []
            for u in self.controls:
                if u.allocation is not None and deltas is not None and len(u.allocation) == len(deltas):
                    en.append(float(np.dot(u.allocation, deltas)))
                else:
                    en.append(float(u.cost))
            object.__setattr__(self, "energy", tuple(en))

    @property
    def n(self) -> int:
        return self.chain.n

    def kernels_for(self, control_id: int) -> tuple[GaussianKernel, ...]:
        return self.kernels[control_id]

    def obs_dim(self, control_id: int) -> int:
        return self.kernels[control_id][0].dim

    def with_lambda(self, lam: float) -> "Scenario":
        return replace(self, lam=float(lam))


# ---------------------------------------------------------------------------
# chain operations


def validate_chain(trans, prior) -> MarkovChain:
    """Check and freeze a column-stochastic chain. Never renormalizes."""
    trans = np.asarray(trans, dtype=float)
    prior = np.asarray(prior, dtype=float).reshape(-1)
    n = prior.shape[0]
    if trans.shape != (n, n):
        raise DimensionMismatch(f"transition shape {trans.shape} does not match prior length {n}")
    if n < 2:
        raise ValidationError("need at least 2 states")
    if (trans < 0).any() or (trans > 1).any():
        raise NegativeEntry("transition entries must lie in [0, 1]")
    col_sums = trans.sum(axis=0)
    if np.abs(col_sums - 1.0).max() > _STOCH_TOL:
        bad = int(np.abs(col_sums - 1.0).argmax())
        raise NonStochastic(f"column {bad} sums to {col_sums[bad]}")
    if (prior < 0).any() or (prior > 1).any():
        raise NegativeEntry("prior entries must lie in [0, 1]")
    if abs(prior.sum() - 1.0) > _STOCH_TOL:
        raise NonStochastic(f"prior sums to {prior.sum()}")
    return MarkovChain(trans=trans.copy(), prior=prior.copy())


def state_marginal(chain: MarkovChain, k: int) -> np.ndarray:
    """Marginal state distribution after k transitions from the prior."""
    if k < 0:
        raise ValidationError("stage index must be >= 0")
    p = chain.prior.copy()
    for _ in range(k):
        p = chain.trans @ p
    return p


# ---------------------------------------------------------------------------
# control enumeration and costs


def enumerate_allocations(num_sensors: int, budget: int, include_empty: bool = False):
    """All nonnegative integer allocations with 1 <= sum <= budget (or 0 <=),
    in lexicographic order."""
    if num_sensors < 1:
        raise ValidationError("need at least one sensor")
    if budget < 1 and not include_empty:
        raise BudgetZero("budget 0 leaves no non-empty controls")

    out = []

    def rec(prefix, remaining):
        if len(prefix) == num_sensors - 1:
            for last in range(remaining + 1):
                out.append(prefix + (last,))
            return
        for a in range(remaining + 1):
            rec(prefix + (a,), remaining - a)

    rec((), max(budget, 0))
    if not include_empty:
        out = [a for a in out if sum(a) > 0]
    out.sort()
    return out


def enumerate_controls(num_sensors: int, budget: int, include_empty: bool = False,
                       deltas=None, norm_c: float | None = None) -> list[Control]:
    """Controls for every allocation within budget, lexicographic, ids 0..m-1.

    Costs are filled from deltas/norm_c when given, else left at 0.
    """
    allocs = enumerate_allocations(num_sensors, budget, include_empty)
    controls = []
    for i, alloc in enumerate(allocs):
        if deltas is not None:
            c = norm_c if norm_c is not None else budget * float(np.max(deltas))
            cost = float(np.dot(alloc, deltas) / c)
        else:
            cost = 0.0
        controls.append(Control(id=i, cost=cost, allocation=alloc))
    return controls


def sensing_cost(control: Control, deltas, norm_c: float) -> float:
    """Normalized energy of one control: (allocation . deltas) / norm_c."""
    if norm_c <= 0:
        raise ValidationError("normalizer must be > 0")
    if control.allocation is None:
        raise ValidationError(f"control {control.id} has no allocation")
    deltas = np.asarray(deltas, dtype=float)
    if len(control.allocation) != deltas.shape[0]:
        raise DimensionMismatch("allocation and deltas lengths differ")
    c = float(np.dot(control.allocation, deltas) / norm_c)
    if c < -1e-12 or c > 1.0 + 1e-12:
        raise CostOutOfRange(f"cost {c} outside [0, 1]; check the normalizer")
    return min(max(c, 0.0), 1.0)


# ---------------------------------------------------------------------------
# observation model


def ar_block(sigma2: float, phi: float, sigma_z2: float, n_samples: int) -> np.ndarray:
    """Covariance of n_samples consecutive AR(1) readings plus white noise."""
    if n_samples == 0:
        return np.zeros((0, 0))
    first = (sigma2 / (1.0 - phi * phi)) * phi ** np.arange(n_samples)
    return toeplitz(first) + sigma_z2 * np.eye(n_samples)


def build_observation_model(sensors, control: Control) -> tuple[GaussianKernel, ...]:
    """Per-state stacked-sample kernels for one allocation.

    Sensor l with N_l requested samples contributes N_l copies of its
    per-state mean and an AR(1) Toeplitz covariance block; blocks are
    independent across sensors. An all-zero allocation yields d = 0.
    """
    if control.allocation is None:
        raise ValidationError(f"control {control.id} has no allocation")
    if len(control.allocation) != len(sensors):
        raise DimensionMismatch("allocation length does not match sensor count")
    n_states = sensors[0].mu.shape[0]
    kernels = []
    for i in range(n_states):
        means = []
        blocks = []
        for spec, n_l in zip(sensors, control.allocation):
            if n_l == 0:
                continue
            means.append(np.full(n_l, spec.mu[i]))
            blocks.append(ar_block(float(spec.sigma2[i]), spec.phi, spec.sigma_z2, n_l))
        if means:
            mean = np.concatenate(means)
            cov = block_diag(*blocks)
        else:
            mean = np.zeros(0)
            cov = np.zeros((0, 0))
        kernels.append(GaussianKernel(mean=mean, cov=cov))
    return tuple(kernels)


# ---------------------------------------------------------------------------
# densities and sampling


def _chol_with_jitter(cov: np.ndarray):
    """Cholesky factor of cov, retrying once with a small diagonal jitter."""
    try:
        return cho_factor(cov, lower=True)
    except np.linalg.LinAlgError:
        pass
    try:
        return cho_factor(cov + _JITTER * np.eye(cov.shape[0]), lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(f"covariance not factorizable even with jitter: {exc}") from exc


def log_likelihood(kernel: GaussianKernel, y) -> float:
    """Log density of observation y under one kernel. d = 0 gives 0."""
    d = kernel.dim
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != d:
        raise DimensionMismatch(f"observation length {y.shape[0]} != kernel dim {d}")
    if d == 0:
        return 0.0
    factor = _chol_with_jitter(kernel.cov)
    resid = y - kernel.mean
    quad = float(resid @ cho_solve(factor, resid))
    logdet = 2.0 * float(np.log(np.diag(factor[0])).sum())
    return -0.5 * (quad + logdet + d * math.log(2.0 * math.pi))


def likelihood(kernel: GaussianKernel, y) -> float:
    """Density of observation y under one kernel. d = 0 gives 1."""
    return math.exp(log_likelihood(kernel, y))


def sample(kernel: GaussianKernel, rng: np.random.Generator) -> np.ndarray:
    """One draw from the kernel; deterministic given the generator state."""
    d = kernel.dim
    if d == 0:
        return np.zeros(0)
    z = rng.standard_normal(d)
    try:
        chol = np.linalg.cholesky(kernel.cov)
        return kernel.mean + chol @ z
    except np.linalg.LinAlgError:
        # PSD-but-singular covariance: factor through the eigendecomposition
        w, v = np.linalg.eigh(kernel.cov)
        w = np.clip(w, 0.0, None)
        return kernel.mean + v @ (np.sqrt(w) * z)
