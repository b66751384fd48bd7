"""Sequential Weiss-Weinstein lower bound for finite-state chains.

The bound tracks, stage by stage, how much information the observation
history carries about the newest hidden state.  It is built from
state-shift test maps, Gaussian overlap coefficients between the
per-state observation kernels, and four families of log-domain terms
that combine chain probabilities with those overlaps.  A scalar
recursion folds the history into one number per stage.

Two evaluation modes are supported:

* ``closed``: closed-form numerators that assume every shifted
  probability mass re-normalizes to one.  That identity holds exactly
  when the test map permutes the state set, so this mode only accepts
  permutation maps.
* ``exact``: evaluates the defining expectations directly, computing
  the actual mass carried by each shifted likelihood ratio.  Partial
  maps (fixed scalar shifts that push edge states out of range) are
  allowed; out-of-range states carry probability zero.

Both modes share all denominators and the cross terms; for permutation
maps they coincide.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import (
    AllTestPointsDegenerate,
    DegenerateRecursion,
    DegenerateTestPoint,
    DimensionMismatch,
    InvalidTestPoint,
    NonpositiveInformation,
    SingularAverageCovariance,
    SingularMixtureCovariance,
    StageOutOfRange,
    ValidationError,
)
from .model import Control, GaussianKernel, MarkovChain, Scenario, state_marginal

MODES = ("closed", "exact")

_NEG_INF = float("-inf")


# ---------------------------------------------------------------------------
# Gaussian overlap coefficients


def _logdet_psd(mat: np.ndarray, what: str) -> float:
    sign, logdet = np.linalg.slogdet(mat)
    if sign <= 0:
        raise SingularAverageCovariance(f"{what} covariance is singular")
    return float(logdet)


def bhattacharyya(kernel_a: GaussianKernel, kernel_b: GaussianKernel) -> float:
    """Overlap integral of two Gaussian densities, in (0, 1].

    Dimension zero (no observation) overlaps perfectly and returns 1.
    """
    if kernel_a.dim != kernel_b.dim:
        raise DimensionMismatch(
            f"kernel dims {kernel_a.dim} and {kernel_b.dim} differ"
        )
    if kernel_a.dim == 0:
        return 1.0
    diff = kernel_a.mean - kernel_b.mean
    avg = 0.5 * (kernel_a.cov + kernel_b.cov)
    ld_avg = _logdet_psd(avg, "averaged")
    ld_a = _logdet_psd(kernel_a.cov, "first")
    ld_b = _logdet_psd(kernel_b.cov, "second")
    try:
        quad = float(diff @ np.linalg.solve(avg, diff))
    except np.linalg.LinAlgError as exc:
        raise SingularAverageCovariance("averaged covariance is singular") from exc
    expo = 0.125 * quad + 0.5 * (ld_avg - 0.5 * (ld_a + ld_b))
    return math.exp(-expo)


def chernoff_exponent(kernel_a: GaussianKernel, kernel_b: GaussianKernel,
                      s: float) -> float:
    """Error exponent -ln integral(f_a^s f_b^(1-s)) for Gaussian pairs.

    At s = 1/2 this equals -ln of the overlap coefficient.
    """
    if not (0.0 < s < 1.0):
        raise ValidationError(f"s={s} must lie strictly inside (0, 1)")
    if kernel_a.dim != kernel_b.dim:
        raise DimensionMismatch(
            f"kernel dims {kernel_a.dim} and {kernel_b.dim} differ"
        )
    if kernel_a.dim == 0:
        return 0.0
    diff = kernel_a.mean - kernel_b.mean
    mix = (1.0 - s) * kernel_a.cov + s * kernel_b.cov
    sign, ld_mix = np.linalg.slogdet(mix)
    if sign <= 0:
        raise SingularMixtureCovariance("mixed covariance is singular")
    sign_a, ld_a = np.linalg.slogdet(kernel_a.cov)
    sign_b, ld_b = np.linalg.slogdet(kernel_b.cov)
    if sign_a <= 0 or sign_b <= 0:
        raise SingularMixtureCovariance("kernel covariance is singular")
    try:
        quad = float(diff @ np.linalg.solve(mix, diff))
    except np.linalg.LinAlgError as exc:
        raise SingularMixtureCovariance("mixed covariance is singular") from exc
    return 0.5 * s * (1.0 - s) * quad + 0.5 * (
        float(ld_mix) - (1.0 - s) * float(ld_a) - s * float(ld_b)
    )


@lru_cache(maxsize=512)
def overlap_matrix(kernels: tuple) -> np.ndarray:
    """Pairwise overlap coefficients between per-state kernels (n x n)."""
    n = len(kernels)
    out = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = bhattacharyya(kernels[i], kernels[j])
    return out


# ---------------------------------------------------------------------------
# test-point maps


@dataclass(frozen=True, eq=False)
class TestPointMap:
    """State-shift map x -> x + offset(x) over states {0..n-1}.

    States whose shifted image falls outside the state space are marked
    invalid; every term involving the map gives them zero weight.
    """

    offsets: tuple[int, ...]
    valid: np.ndarray
    targets: np.ndarray
    bijective: bool

    @classmethod
    def _raw(cls, offsets: tuple[int, ...]) -> "TestPointMap":
        # internal path: permits empty valid sets (negated partial maps)
        n = len(offsets)
        off = np.asarray(offsets, dtype=int)
        targets = np.arange(n) + off
        valid = (targets >= 0) & (targets < n)
        bij = bool(valid.all()) and len(set(targets.tolist())) == n
        return cls(offsets=tuple(int(o) for o in offsets), valid=valid,
                   targets=targets, bijective=bij)

    @classmethod
    def from_offsets(cls, offsets) -> "TestPointMap":
        """Total map: every state must shift to another in-range state."""
        tp = cls._raw(tuple(int(o) for o in offsets))
        if not tp.valid.all():
            raise InvalidTestPoint(
                f"offsets {tp.offsets} push a state out of range; "
                "use fixed_shift for partial maps"
            )
        if all(o == 0 for o in tp.offsets):
            raise InvalidTestPoint("the all-zero shift is not a test point")
        return tp

    @classmethod
    def fixed_shift(cls, n: int, shift: int) -> "TestPointMap":
        """Constant shift applied to every state; edge states drop out."""
        if shift == 0:
            raise InvalidTestPoint("the all-zero shift is not a test point")
        tp = cls._raw((int(shift),) * int(n))
        if not tp.valid.any():
            raise InvalidTestPoint(f"shift {shift} maps no state inside 0..{n - 1}")
        return tp

    @property
    def n(self) -> int:
        return len(self.offsets)

    def negate(self) -> "TestPointMap":
        # literal sign flip; may leave no valid state, which downstream
        # terms treat as an exact zero
        return TestPointMap._raw(tuple(-o for o in self.offsets))

    @property
    def label(self) -> str:
        return "|".join(str(o) for o in self.offsets)


def _zero_map(n: int) -> TestPointMap:
    return TestPointMap._raw((0,) * n)


@lru_cache(maxsize=64)
def enumerate_test_points(n: int) -> tuple[TestPointMap, ...]:
    """All n!-1 non-identity permutation maps, lexicographic by permutation."""
    ident = tuple(range(n))
    out = []
    for perm in itertools.permutations(range(n)):
        if perm == ident:
            continue
        out.append(TestPointMap.from_offsets(tuple(perm[i] - i for i in range(n))))
    return tuple(out)


@lru_cache(maxsize=16)
def enumerate_pairs(n: int) -> tuple[tuple[TestPointMap, TestPointMap], ...]:
    """All ordered pairs of permutation maps for a two-stage advance."""
    maps = enumerate_test_points(n)
    return tuple(itertools.product(maps, maps))


# ---------------------------------------------------------------------------
# log-domain information terms
#
# Conventions: trans[i, j] = P(next=i | current=j); weight vectors are
# the state marginal at the relevant earlier time.  Sums that come out
# empty or zero yield -inf, never NaN.


def _log(total: float) -> float:
    return math.log(total) if total > 0.0 else _NEG_INF


def _pair_indices(tp_a: TestPointMap, tp_b: TestPointMap):
    mask = tp_a.valid & tp_b.valid
    idx = np.nonzero(mask)[0]
    return idx, tp_a.targets[idx], tp_b.targets[idx]


@lru_cache(maxsize=256)
def _transition_overlap(chain: MarkovChain) -> np.ndarray:
    # out[i, j] = sum_x sqrt(T[x, i] T[x, j]): overlap of the next-state
    # distributions out of states i and j
    sq = np.sqrt(chain.trans)
    return sq.T @ sq


def _prior_term(prior: np.ndarray, xi0: np.ndarray,
                tp_a: TestPointMap, tp_b: TestPointMap) -> float:
    idx, sa, sb = _pair_indices(tp_a, tp_b)
    if idx.size == 0:
        return _NEG_INF
    total = float(np.sum(np.sqrt(prior[sa] * prior[sb]) * xi0[sa, sb]))
    return _log(total)


def _next_term(chain: MarkovChain, weight: np.ndarray, xi_next: np.ndarray,
               tp_a: TestPointMap, tp_b: TestPointMap) -> float:
    # shift the state observed at the new stage; weight = marginal one
    # step earlier
    idx, sa, sb = _pair_indices(tp_a, tp_b)
    if idx.size == 0:
        return _NEG_INF
    inner = np.sqrt(chain.trans[sa, :] * chain.trans[sb, :]) @ weight
    total = float(np.sum(inner * xi_next[sa, sb]))
    return _log(total)


def _current_term_prior(chain: MarkovChain, prior: np.ndarray, xi0: np.ndarray,
                        tp_a: TestPointMap, tp_b: TestPointMap) -> float:
    idx, sa, sb = _pair_indices(tp_a, tp_b)
    if idx.size == 0:
        return _NEG_INF
    over = _transition_overlap(chain)
    total = float(np.sum(np.sqrt(prior[sa] * prior[sb]) * over[sa, sb]
                         * xi0[sa, sb]))
    return _log(total)


def _current_term_marginal(chain: MarkovChain, weight: np.ndarray,
                           xi_stage: np.ndarray, tp_a: TestPointMap,
                           tp_b: TestPointMap) -> float:
    # shift the state observed at the current stage; both the transition
    # into it and out of it feel the shift
    idx, sa, sb = _pair_indices(tp_a, tp_b)
    if idx.size == 0:
        return _NEG_INF
    into = np.sqrt(chain.trans[sa, :] * chain.trans[sb, :]) @ weight
    over = _transition_overlap(chain)
    total = float(np.sum(into * over[sa, sb] * xi_stage[sa, sb]))
    return _log(total)


def _cross_b_matrix(chain: MarkovChain, xi_next: np.ndarray,
                    tp_b: TestPointMap) -> np.ndarray:
    # B[i, x] = sum over b-valid x+ of sqrt(T[x+, i] T[sb(x+), x]) * xi_next
    bv = np.nonzero(tp_b.valid)[0]
    sq = np.sqrt(chain.trans)
    if bv.size == 0:
        return np.zeros((chain.n, chain.n))
    sb = tp_b.targets[bv]
    scaled = sq[sb, :] * xi_next[sb, bv][:, None]
    return sq[bv, :].T @ scaled


def _cross_term(chain: MarkovChain, weight: np.ndarray | None,
                prior: np.ndarray | None, xi_stage: np.ndarray,
                xi_next: np.ndarray, tp_a: TestPointMap,
                tp_b: TestPointMap) -> float:
    # couples a current-stage shift (map a) with a next-stage shift (map b);
    # weight is the marginal before the current stage, or None to use the
    # prior directly at stage zero
    av = np.nonzero(tp_a.valid)[0]
    if av.size == 0:
        return _NEG_INF
    sa = tp_a.targets[av]
    if weight is None:
        w_a = np.sqrt(prior[sa] * prior[av]) * xi_stage[sa, av]
    else:
        into = np.sqrt(chain.trans[sa, :] * chain.trans[av, :]) @ weight
        w_a = into * xi_stage[sa, av]
    bmat = _cross_b_matrix(chain, xi_next, tp_b)
    total = float(np.sum(w_a * bmat[sa, av]))
    return _log(total)


def log_term(kind: str, chain: MarkovChain, kernel_schedule, tp_a, tp_b,
             stage: int) -> float:
    """One log-domain information term; may be -inf.

    ``kernel_schedule`` holds one per-state kernel tuple per time index:
    entry t generated observation t.  ``tp_a``/``tp_b`` are test maps or
    None for the zero map.  Kinds:

    * ``prior``:   initial-state term (stage 0 only); uses schedule[0].
    * ``next``:    term for the newly estimated state at stage+1; uses
                   the marginal at ``stage`` and schedule[stage+1].
    * ``current``: term for the state estimated at ``stage`` after one
                   more transition; uses schedule[stage].
    * ``cross``:   coupling between a current-stage and a next-stage
                   shift; uses schedule[stage] and schedule[stage+1].
    """
    n = chain.n
    tp_a = _zero_map(n) if tp_a is None else tp_a
    tp_b = _zero_map(n) if tp_b is None else tp_b
    if len(tp_a.offsets) != n or len(tp_b.offsets) != n:
        raise DimensionMismatch("test map length does not match state count")
    if stage < 0:
        raise StageOutOfRange(f"stage {stage} is negative")
    prior = chain.prior

    if kind == "prior":
        if stage != 0:
            raise StageOutOfRange("prior term only exists at stage 0")
        xi0 = overlap_matrix(tuple(kernel_schedule[0]))
        return _prior_term(prior, xi0, tp_a, tp_b)
    if kind == "next":
        if stage + 1 >= len(kernel_schedule):
            raise StageOutOfRange(
                f"next term at stage {stage} needs kernels for time {stage + 1}"
            )
        xi_next = overlap_matrix(tuple(kernel_schedule[stage + 1]))
        weight = _stage_marginal(chain, stage)
        return _next_term(chain, weight, xi_next, tp_a, tp_b)
    if kind == "current":
        xi_stage = overlap_matrix(tuple(kernel_schedule[stage]))
        if stage == 0:
            return _current_term_prior(chain, prior, xi_stage, tp_a, tp_b)
        weight = _stage_marginal(chain, stage - 1)
        return _current_term_marginal(chain, weight, xi_stage, tp_a, tp_b)
    if kind == "cross":
        if stage + 1 >= len(kernel_schedule):
            raise StageOutOfRange(
                f"cross term at stage {stage} needs kernels for time {stage + 1}"
            )
        xi_stage = overlap_matrix(tuple(kernel_schedule[stage]))
        xi_next = overlap_matrix(tuple(kernel_schedule[stage + 1]))
        if stage == 0:
            return _cross_term(chain, None, prior, xi_stage, xi_next, tp_a, tp_b)
        weight = _stage_marginal(chain, stage - 1)
        return _cross_term(chain, weight, None, xi_stage, xi_next, tp_a, tp_b)
    raise ValidationError(f"unknown log-term kind {kind!r}")


@lru_cache(maxsize=1024)
def _stage_marginal(chain: MarkovChain, k: int) -> np.ndarray:
    return state_marginal(chain, k)


# ---------------------------------------------------------------------------
# likelihood-ratio masses (exact mode)


def _mass_pair_prior(prior: np.ndarray, tp: TestPointMap) -> tuple[float, float]:
    dom = np.nonzero(tp.valid)[0]
    return float(prior[tp.targets[dom]].sum()), float(prior[dom].sum())


def _mass_pair_step(chain: MarkovChain, weight: np.ndarray,
                    tp: TestPointMap) -> tuple[float, float]:
    # forward mass of the shifted transition kernel, and of its domain
    dom = np.nonzero(tp.valid)[0]
    plus = float(np.sum(chain.trans[tp.targets[dom], :] @ weight))
    minus = float(np.sum(chain.trans[dom, :] @ weight))
    return plus, minus


# ---------------------------------------------------------------------------
# accumulator and recursion


@dataclass(frozen=True, eq=False)
class WwlbAccumulator:
    """Immutable record of a committed sensing history for the bound.

    ``committed`` lists the control ids whose kernels generated the
    observations at times 0..stage; ``marginals`` caches the state
    marginal at each of those times.  ``last_g`` stores the two cross
    entries carried into the next advance.
    """

    scenario: Scenario
    mode: str
    stage: int
    a_value: float | None
    last_g: tuple[float, float] | None
    committed: tuple[int, ...]
    marginals: tuple[np.ndarray, ...]
    pairs: tuple = ()
    j_value: float | None = None

    @property
    def schedule(self) -> tuple:
        return tuple(self.scenario.kernels[c] for c in self.committed)


def init_accumulator(scenario: Scenario, mode: str = "closed") -> WwlbAccumulator:
    """Fresh accumulator: only the initial observation is committed."""
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    return WwlbAccumulator(
        scenario=scenario,
        mode=mode,
        stage=0,
        a_value=None,
        last_g=None,
        committed=(scenario.initial_control,),
        marginals=(scenario.chain.prior.copy(),),
    )


def j0(prior: np.ndarray, kernels_at_0, tp: TestPointMap,
       mode: str = "closed") -> float:
    """Information about the initial state from the first observation."""
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "closed" and not tp.bijective:
        raise InvalidTestPoint(
            "closed mode needs a permutation map; use exact mode for "
            "partial shifts"
        )
    prior = np.asarray(prior, dtype=float)
    xi0 = overlap_matrix(tuple(kernels_at_0))
    base = _prior_term(prior, xi0, tp, _zero_map(tp.n))
    if base == _NEG_INF:
        raise DegenerateTestPoint(
            f"map {tp.offsets} has no support overlap with the prior"
        )
    mixed = math.exp(_prior_term(prior, xi0, tp, tp.negate()))
    if mode == "closed":
        numer = 2.0 * (1.0 - mixed)
    else:
        plus, minus = _mass_pair_prior(prior, tp)
        numer = plus + minus - 2.0 * mixed
    return numer / math.exp(2.0 * base)


def g_entries(accum: WwlbAccumulator, chain: MarkovChain, kernels,
              tp_current: TestPointMap, tp_next: TestPointMap,
              control_id: int) -> tuple[float, float, float]:
    """Information entries for one advance of the recursion.

    ``kernels`` are the per-state kernels of the candidate control for
    the next observation; ``tp_current`` shifts the state estimated at
    the accumulator's stage, ``tp_next`` the one after it.  Returns
    (newest diagonal, cross, previous diagonal).
    """
    if accum.mode == "closed" and not (tp_current.bijective and tp_next.bijective):
        raise InvalidTestPoint(
            "closed mode needs permutation maps; use exact mode for "
            "partial shifts"
        )
    k = accum.stage
    xi_stage = overlap_matrix(tuple(accum.schedule[k]))
    xi_next = overlap_matrix(tuple(kernels))
    prior = chain.prior
    weight_now = accum.marginals[k]
    weight_prev = accum.marginals[k - 1] if k >= 1 else None
    zero = _zero_map(chain.n)

    # denominators first: a vanishing one makes the pair unusable
    if k == 0:
        cur0 = _current_term_prior(chain, prior, xi_stage, tp_current, zero)
    else:
        cur0 = _current_term_marginal(chain, weight_prev, xi_stage,
                                      tp_current, zero)
    new0 = _next_term(chain, weight_now, xi_next, tp_next, zero)
    if cur0 == _NEG_INF or new0 == _NEG_INF:
        raise DegenerateTestPoint(
            f"maps {tp_current.offsets}/{tp_next.offsets} have no support "
            f"overlap at stage {k}"
        )

    neg_cur = tp_current.negate()
    neg_next = tp_next.negate()
    if k == 0:
        cur_mix = math.exp(_current_term_prior(chain, prior, xi_stage,
                                               tp_current, neg_cur))
    else:
        cur_mix = math.exp(_current_term_marginal(chain, weight_prev, xi_stage,
                                                  tp_current, neg_cur))
    new_mix = math.exp(_next_term(chain, weight_now, xi_next, tp_next, neg_next))

    if accum.mode == "closed":
        num_cur = 2.0 * (1.0 - cur_mix)
        num_new = 2.0 * (1.0 - new_mix)
    else:
        if k == 0:
            cur_plus, cur_minus = _mass_pair_prior(prior, tp_current)
        else:
            cur_plus, cur_minus = _mass_pair_step(chain, weight_prev, tp_current)
        new_plus, new_minus = _mass_pair_step(chain, weight_now, tp_next)
        num_cur = cur_plus + cur_minus - 2.0 * cur_mix
        num_new = new_plus + new_minus - 2.0 * new_mix

    g_prev = num_cur / math.exp(2.0 * cur0)
    g_new = num_new / math.exp(2.0 * new0)

    def cross(tp_a, tp_b):
        if k == 0:
            return math.exp(_cross_term(chain, None, prior, xi_stage, xi_next,
                                        tp_a, tp_b))
        return math.exp(_cross_term(chain, weight_prev, None, xi_stage,
                                    xi_next, tp_a, tp_b))

    numer = (cross(tp_current, tp_next) - cross(neg_cur, tp_next)
             - cross(tp_current, neg_next) + cross(neg_cur, neg_next))
    g_cross = numer / math.exp(new0 + cur0)
    return g_new, g_cross, g_prev


def _recurse(accum: WwlbAccumulator, entries) -> tuple[float, float, float]:
    g_new, g_cross, g_prev = entries
    if accum.a_value is None:
        a_next = g_prev
    else:
        a_next = g_prev - accum.last_g[0] * accum.last_g[1] / accum.a_value
    if a_next <= 0.0:
        raise DegenerateRecursion(
            f"accumulated information {a_next} is not positive at stage "
            f"{accum.stage + 1}"
        )
    j_value = g_new - g_cross * g_cross / a_next
    return j_value, a_next, g_cross


def advance(accum: WwlbAccumulator, control_id, tp_current: TestPointMap,
            tp_next: TestPointMap) -> tuple[float, WwlbAccumulator]:
    """Commit one control and test-map pair; returns (J, new accumulator)."""
    cid = control_id.id if isinstance(control_id, Control) else int(control_id)
    scenario = accum.scenario
    chain = scenario.chain
    kernels = scenario.kernels[cid]
    entries = g_entries(accum, chain, kernels, tp_current, tp_next, cid)
    j_value, a_next, g_cross = _recurse(accum, entries)
    new = replace(
        accum,
        stage=accum.stage + 1,
        a_value=a_next,
        last_g=(g_cross, g_cross),
        committed=accum.committed + (cid,),
        marginals=accum.marginals + (state_marginal(chain, accum.stage + 1),),
        pairs=accum.pairs + ((tp_current, tp_next),),
        j_value=j_value,
    )
    return j_value, new


def pair_information(accum: WwlbAccumulator, control_id,
                     pair: tuple[TestPointMap, TestPointMap]) -> float:
    """J for one candidate pair without committing anything."""
    cid = control_id.id if isinstance(control_id, Control) else int(control_id)
    kernels = accum.scenario.kernels[cid]
    entries = g_entries(accum, accum.scenario.chain, kernels, pair[0], pair[1],
                        cid)
    j_value, _, _ = _recurse(accum, entries)
    return j_value


def v_score_with_pair(accum: WwlbAccumulator, control_id, test_points=None):
    """Best inverse information over candidate pairs: (score, pair)."""
    cid = control_id.id if isinstance(control_id, Control) else int(control_id)
    pairs = enumerate_pairs(accum.scenario.n) if test_points is None \
        else tuple(test_points)
    if not pairs:
        raise ValidationError("empty test-point pair set")
    best = None
    best_pair = None
    for pair in pairs:
        try:
            j_value = pair_information(accum, cid, pair)
        except (DegenerateTestPoint, DegenerateRecursion):
            continue
        if j_value <= 0.0:
            continue
        inv = 1.0 / j_value
        if best is None or inv > best:
            best = inv
            best_pair = pair
    if best is None:
        raise AllTestPointsDegenerate(
            f"every test-point pair is degenerate for control {cid}"
        )
    return best, best_pair


def v_score(accum: WwlbAccumulator, control_id, test_points=None) -> float:
    """Best inverse information over candidate pairs for one control."""
    best, _ = v_score_with_pair(accum, control_id, test_points)
    return best


def wwlb_bound(j_value: float, h_scale: float = 1.0) -> float:
    """Mean-square error floor from one information value."""
    if j_value <= 0.0:
        raise NonpositiveInformation(f"information {j_value} is not positive")
    return h_scale * h_scale / j_value


# ---------------------------------------------------------------------------
# simulation estimate of the defining expectations
#
# Independent route used to check the closed summations: draw
# trajectories and observations, form the shifted likelihood ratios,
# and average sqrt(ratio_a * ratio_b).


def _sample_states(chain: MarkovChain, steps: int, samples: int, rng):
    cdf0 = np.cumsum(chain.prior)
    states = np.empty((steps + 1, samples), dtype=int)
    states[0] = np.searchsorted(cdf0, rng.random(samples), side="right")
    cdf_cols = np.cumsum(chain.trans, axis=0)
    for t in range(steps):
        u = rng.random(samples)
        rows = cdf_cols[:, states[t]]
        states[t + 1] = (u[None, :] > rows).sum(axis=0)
    return states


def _sample_obs(kernels, states: np.ndarray, rng) -> np.ndarray:
    d = kernels[0].dim
    samples = states.shape[0]
    out = np.zeros((samples, d))
    if d == 0:
        return out
    for i, kernel in enumerate(kernels):
        mask = states == i
        count = int(mask.sum())
        if count == 0:
            continue
        try:
            chol = np.linalg.cholesky(kernel.cov)
        except np.linalg.LinAlgError:
            vals, vecs = np.linalg.eigh(kernel.cov)
            chol = vecs * np.sqrt(np.clip(vals, 0.0, None))
        out[mask] = kernel.mean + rng.standard_normal((count, d)) @ chol.T
    return out


def _logpdf_table(kernels, obs: np.ndarray) -> np.ndarray:
    # table[s, i] = log density of observation s under kernel i
    d = kernels[0].dim
    samples = obs.shape[0]
    if d == 0:
        return np.zeros((samples, len(kernels)))
    out = np.empty((samples, len(kernels)))
    for i, kernel in enumerate(kernels):
        diff = obs - kernel.mean
        sign, ld = np.linalg.slogdet(kernel.cov)
        sol = np.linalg.solve(kernel.cov, diff.T).T
        quad = np.einsum("sd,sd->s", diff, sol)
        out[:, i] = -0.5 * (quad + ld + d * math.log(2.0 * math.pi))
    return out


def _ratio_prior(chain, table, states0, tp):
    # shifted-vs-actual ratio for the initial state and its observation
    ratio = np.zeros(states0.shape[0])
    ok = tp.valid[states0]
    src = states0[ok]
    tgt = tp.targets[src]
    ratio[ok] = (chain.prior[tgt] / chain.prior[src]) * np.exp(
        table[ok, tgt] - table[ok, src]
    )
    return ratio


def _ratio_next(chain, table, prev, cur, tp):
    # shift the newly reached state: transition in and its observation
    ratio = np.zeros(cur.shape[0])
    ok = tp.valid[cur]
    src = cur[ok]
    tgt = tp.targets[src]
    ratio[ok] = (chain.trans[tgt, prev[ok]] / chain.trans[src, prev[ok]]) \
        * np.exp(table[ok, tgt] - table[ok, src])
    return ratio


def _ratio_current(chain, table, prev, cur, nxt, tp):
    # shift the middle state: transition in, transition out, observation
    ratio = np.zeros(cur.shape[0])
    ok = tp.valid[cur]
    src = cur[ok]
    tgt = tp.targets[src]
    ratio[ok] = (chain.trans[tgt, prev[ok]] / chain.trans[src, prev[ok]]) \
        * (chain.trans[nxt[ok], tgt] / chain.trans[nxt[ok], src]) \
        * np.exp(table[ok, tgt] - table[ok, src])
    return ratio


def expectation_estimate(kind: str, chain: MarkovChain, kernel_schedule,
                         tp_a, tp_b, stage: int, samples: int,
                         rng) -> tuple[float, float]:
    """Monte Carlo estimate (mean, standard error) of one term.

    Estimates the expectation whose log the closed summation in
    ``log_term`` computes, by simulating trajectories plus observations
    and averaging sqrt of the product of the two shifted ratios.
    """
    n = chain.n
    tp_a = _zero_map(n) if tp_a is None else tp_a
    tp_b = _zero_map(n) if tp_b is None else tp_b
    if kind == "prior" and stage != 0:
        raise StageOutOfRange("prior term only exists at stage 0")
    steps = stage + 1 if kind in ("next", "current", "cross") else 0
    states = _sample_states(chain, steps, samples, rng)

    if kind == "prior":
        obs = _sample_obs(kernel_schedule[0], states[0], rng)
        table = _logpdf_table(kernel_schedule[0], obs)
        ra = _ratio_prior(chain, table, states[0], tp_a)
        rb = _ratio_prior(chain, table, states[0], tp_b)
    elif kind == "next":
        obs = _sample_obs(kernel_schedule[stage + 1], states[stage + 1], rng)
        table = _logpdf_table(kernel_schedule[stage + 1], obs)
        ra = _ratio_next(chain, table, states[stage], states[stage + 1], tp_a)
        rb = _ratio_next(chain, table, states[stage], states[stage + 1], tp_b)
    elif kind == "current":
        obs = _sample_obs(kernel_schedule[stage], states[stage], rng)
        table = _logpdf_table(kernel_schedule[stage], obs)
        if stage == 0:
            ra = _ratio_current_initial(chain, table, states, tp_a)
            rb = _ratio_current_initial(chain, table, states, tp_b)
        else:
            ra = _ratio_current(chain, table, states[stage - 1], states[stage],
                                states[stage + 1], tp_a)
            rb = _ratio_current(chain, table, states[stage - 1], states[stage],
                                states[stage + 1], tp_b)
    elif kind == "cross":
        obs_k = _sample_obs(kernel_schedule[stage], states[stage], rng)
        table_k = _logpdf_table(kernel_schedule[stage], obs_k)
        obs_n = _sample_obs(kernel_schedule[stage + 1], states[stage + 1], rng)
        table_n = _logpdf_table(kernel_schedule[stage + 1], obs_n)
        if stage == 0:
            ra = _ratio_current_initial(chain, table_k, states, tp_a)
        else:
            ra = _ratio_current(chain, table_k, states[stage - 1],
                                states[stage], states[stage + 1], tp_a)
        rb = _ratio_next(chain, table_n, states[stage], states[stage + 1], tp_b)
    else:
        raise ValidationError(f"unknown log-term kind {kind!r}")

    vals = np.sqrt(ra * rb)
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(samples))
    return mean, se


def _ratio_current_initial(chain, table, states, tp):
    # stage-zero variant: the shifted state is the initial one, so the
    # prior replaces the incoming transition
    cur = states[0]
    nxt = states[1]
    ratio = np.zeros(cur.shape[0])
    ok = tp.valid[cur]
    src = cur[ok]
    tgt = tp.targets[src]
    ratio[ok] = (chain.prior[tgt] / chain.prior[src]) \
        * (chain.trans[nxt[ok], tgt] / chain.trans[nxt[ok], src]) \
        * np.exp(table[ok, tgt] - table[ok, src])
    return ratio
