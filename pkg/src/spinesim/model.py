"""Particle motions and offspring laws.

Two motion backends: a finite-state continuous-time chain with optional killing
(the exact-arithmetic substrate for every oracle in this package) and standard
Brownian motion on an open interval, killed at the first exit. Offspring laws
live on {2, 3, ...} so a particle is always replaced by at least two children;
the heavy-tailed family p_k = c k^-2 (log k)^-2 has finite mean but infinite
sum of k log k p_k, which is the property the dichotomy experiment contrasts
against finite-support laws.

All objects are immutable after construction apart from the lazily extended
CDF table inside the heavy-tailed laws, which only ever grows and is guarded
by a lock; samplers draw from an explicit numpy Generator.
"""

import math

import numpy as np
from scipy.special import expn
from scipy.stats import norm

__all__ = [
    "FiniteChainMotion",
    "KilledDiffusion1D",
    "OffspringLaw",
    "FiniteOffspring",
    "HeavyTailOffspring",
    "SizeBiasedHeavyTail",
    "BranchingParams",
    "ModelSpec",
    "ValidationReport",
    "validate_model",
    "offspring_mean",
    "psi_eval",
    "size_biased_law",
    "sample_offspring",
    "step_motion",
]


class FiniteChainMotion:
    """Continuous-time Markov chain on states {0, ..., n-1} with killing.

    The stored `generator` is the killed (sub-Markovian) generator: off-diagonal
    entries are jump rates, and each row sums to -killing[x]. A conservative
    chain therefore has rows summing to zero. `measure` is the strictly
    positive reference measure used for inner products and left-eigenvector
    normalization; it defaults to the counting measure.
    """

    def __init__(self, generator, killing=None, measure=None):
        q = np.asarray(generator, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValueError("generator must be a square matrix")
        if not np.all(np.isfinite(q)):
            raise ValueError("generator contains non-finite entries")
        n = q.shape[0]
        if killing is None:
            killing = -q.sum(axis=1)
            killing[np.abs(killing) < 1e-12] = 0.0
        self.generator = q
        self.killing = np.asarray(killing, dtype=float)
        self.measure = np.ones(n) if measure is None else np.asarray(measure, dtype=float)
        self.n_states = n
        self._exit_rates = -np.diag(q)
        q.setflags(write=False)
        self.killing.setflags(write=False)
        self.measure.setflags(write=False)

    @property
    def is_finite(self):
        return True

    def jump(self, state, rng):
        """One exact jump-chain step from `state`.

        Returns (holding_time, next_state) where next_state is None when the
        event is a kill. The holding time is Exp(total exit rate); at the
        event the chain jumps to y with probability q[x, y] / rate and is
        killed with probability killing[x] / rate. A state with zero exit
        rate is absorbing: the holding time is infinite.
        """
        rate = self._exit_rates[state]
        if rate <= 0.0:
            return math.inf, state
        tau = rng.exponential() / rate
        u = rng.random() * rate
        acc = 0.0
        for y in range(self.n_states):
            if y == state:
                continue
            acc += self.generator[state, y]
            if u < acc:
                return tau, y
        return tau, None  # remaining mass is the killing rate

    def validation_checks(self):
        q = self.generator
        offdiag = q - np.diag(np.diag(q))
        checks = [
            ("generator off-diagonals nonnegative", bool(np.all(offdiag >= 0)), ""),
            (
                "row sum + killing = 0",
                bool(np.all(np.abs(q.sum(axis=1) + self.killing) <= 1e-12)),
                "",
            ),
            ("killing nonnegative", bool(np.all(self.killing >= 0)), ""),
            ("reference measure positive", bool(np.all(self.measure > 0)), ""),
            ("chain irreducible", self._irreducible(), ""),
        ]
        return checks

    def _irreducible(self):
        # strong connectivity of the jump graph, both directions
        adj = self.generator > 0
        for mat in (adj, adj.T):
            seen = {0}
            stack = [0]
            while stack:
                x = stack.pop()
                for y in np.nonzero(mat[x])[0]:
                    if y not in seen:
                        seen.add(int(y))
                        stack.append(int(y))
            if len(seen) != self.n_states:
                return False
        return True


class KilledDiffusion1D:
    """Brownian motion on the open interval (a, b), killed at the first exit.

    Paths are advanced by Euler steps of size `step_dt` with unit diffusion
    coefficient. With `bridge_correction` enabled (the default) each step also
    kills with the exact Brownian-bridge boundary-hitting probability
    exp(-2 (x0-a)(x1-a)/dt), so the one-step exit law matches the continuous
    first-exit law; with it disabled the scheme only checks grid points and
    under-kills by O(sqrt(dt)), which is observable at Monte Carlo scale and
    kept available for exactly that demonstration.
    """

    def __init__(self, a, b, step_dt=1e-3, bridge_correction=True):
        if not (b > a):
            raise ValueError("interval must satisfy a < b")
        if step_dt <= 0:
            raise ValueError("step_dt must be positive")
        self.a = float(a)
        self.b = float(b)
        self.step_dt = float(step_dt)
        self.bridge_correction = bool(bridge_correction)

    @property
    def is_finite(self):
        return False

    def contains(self, x):
        return self.a < x < self.b

    def euler_step(self, x, rng, dt=None):
        """One Euler step; returns the new position or None if killed.

        `dt` overrides the configured step for the final partial step of a
        segment, so paths can land exactly on fission times and horizons.
        """
        if dt is None:
            dt = self.step_dt
        x1 = x + math.sqrt(dt) * rng.standard_normal()
        if not self.a < x1 < self.b:
            return None
        if self.bridge_correction:
            if rng.random() < math.exp(-2.0 * (x - self.a) * (x1 - self.a) / dt):
                return None
            if rng.random() < math.exp(-2.0 * (self.b - x) * (self.b - x1) / dt):
                return None
        return x1

    def one_step_exit_probability(self, x):
        """Exact probability that a single step from x kills the particle.

        With the bridge correction this is the continuous first-passage
        probability of either boundary over one step, which for a single
        boundary is the reflection value 2 Phi((a-x)/sqrt(dt)); without it,
        only the grid-point mass Phi((a-x)/sqrt(dt)) + Phi((x-b)/sqrt(dt)).
        Double crossings of both boundaries in one step are neglected, an
        error below exp(-2 (b-a)^2 / (4 dt)) of no consequence at the default
        step. Used as the oracle for step-level tests.
        """
        s = math.sqrt(self.step_dt)
        left = norm.cdf((self.a - x) / s)
        right = norm.cdf((x - self.b) / s)
        if self.bridge_correction:
            return 2.0 * (left + right)
        return left + right

    def validation_checks(self):
        return [
            ("interval nonempty", self.b > self.a, ""),
            ("step size positive", self.step_dt > 0, ""),
        ]


# --- offspring laws ---------------------------------------------------------

# Normalizer and mean of p_k = c k^-2 log^-2 k, k >= 2, recomputed here with
# integral-comparison tail bounds and frozen against a 40-digit oracle in the
# test suite.
_HEAVY_Z_CUTOFF = 2**16
_HEAVY_MEAN_CUTOFF = 2**25


def _log_square_terms(lo, hi, power, scale=1.0):
    k = np.arange(lo, hi, dtype=np.float64)
    return scale / (k**power * np.log(k) ** 2)


def _heavy_normalizer():
    """Normalizer c with remainder below 1e-12.

    Direct sum of k^-2 log^-2 k to K, then the tail sandwich
    [integral from K+1, integral from K] whose midpoint is taken; the exact
    integral is E_2(log a)/log a after substituting u = log x. The half-width
    f(K)/2 is ~9e-13 at K = 2**16.
    """
    K = _HEAVY_Z_CUTOFF
    partial = float(np.sum(_log_square_terms(2, K + 1, 2)))

    def integral(a):
        la = math.log(a)
        return float(expn(2, la)) / la

    z = partial + 0.5 * (integral(K) + integral(K + 1))
    return 1.0 / z


_HEAVY_C = _heavy_normalizer()


class OffspringLaw:
    """Common interface of the offspring laws; concrete laws subclass this."""

    def mean(self):
        raise NotImplementedError

    def pmf(self, k):
        raise NotImplementedError

    def pgf(self, z):
        raise NotImplementedError

    def sample(self, rng, size):
        raise NotImplementedError

    def sample_one(self, rng):
        return int(self.sample(rng, 1)[0])


class FiniteOffspring(OffspringLaw):
    """Offspring law with finite support inside {2, 3, ...}.

    `support` and `probs` must align; probabilities must sum to one within
    1e-12. Sampling is exact inverse-CDF via a cumulative table.
    """

    def __init__(self, support, probs):
        support = np.asarray(support, dtype=np.int64)
        probs = np.asarray(probs, dtype=float)
        if support.shape != probs.shape or support.ndim != 1 or len(support) == 0:
            raise ValueError("support and probs must be matching 1-d arrays")
        order = np.argsort(support)
        support, probs = support[order], probs[order]
        if len(np.unique(support)) != len(support):
            raise ValueError("support values must be distinct")
        self.support = support
        self.probs = probs
        self._cdf = np.cumsum(probs)
        for arr in (self.support, self.probs, self._cdf):
            arr.setflags(write=False)

    def validation_checks(self):
        return [
            ("offspring support has no 0 or 1", bool(self.support.min() >= 2), ""),
            ("offspring probabilities nonnegative", bool(np.all(self.probs >= 0)), ""),
            (
                "offspring probabilities sum to 1",
                bool(abs(self.probs.sum() - 1.0) <= 1e-12),
                f"sum = {self.probs.sum()!r}",
            ),
        ]

    def mean(self):
        return float(self.support @ self.probs)

    def second_moment(self):
        return float((self.support.astype(float) ** 2) @ self.probs)

    def pmf(self, k):
        idx = np.searchsorted(self.support, k)
        if idx < len(self.support) and self.support[idx] == k:
            return float(self.probs[idx])
        return 0.0

    def pgf(self, z):
        return float(np.sum(self.probs * z ** self.support.astype(float)))

    def sample(self, rng, size):
        u = rng.random(size)
        return self.support[np.searchsorted(self._cdf, u, side="right").clip(max=len(self.support) - 1)]

    def size_biased(self):
        mean = self.mean()
        return FiniteOffspring(self.support, self.support * self.probs / mean)

    def l_value(self, phi_x):
        """Sum of k phi log+(k phi) p_k, evaluated exactly."""
        kphi = self.support * phi_x
        return float(np.sum(kphi * np.maximum(np.log(kphi), 0.0) * self.probs))

    def __eq__(self, other):
        return (
            isinstance(other, FiniteOffspring)
            and np.array_equal(self.support, other.support)
            and np.array_equal(self.probs, other.probs)
        )

    def __hash__(self):
        return hash((self.support.tobytes(), self.probs.tobytes()))


_HEAVY_TABLE_TOP = 2**22


def _tabulated_cdf(power, scale, top):
    """Cumulative table of scale / (k^power log^2 k) over k = 2 .. top-1."""
    cdf = np.cumsum(_log_square_terms(2, top, power, scale))
    cdf.setflags(write=False)
    return cdf


_BASE_CDF = None


def _heavy_base_cdf():
    # One shared table per process; every HeavyTailOffspring instance uses the
    # same constant c, so there is nothing instance-specific to store.
    global _BASE_CDF
    if _BASE_CDF is None:
        _BASE_CDF = _tabulated_cdf(2, _HEAVY_C, _HEAVY_TABLE_TOP)
    return _BASE_CDF


def _heavy_tail_draw(rng):
    """One draw from the base law conditioned on landing beyond the table.

    Rejection against the envelope q_k = K1 / (k (k+1)) on k >= K1, which
    telescopes, so its inverse cdf is floor(K1 / u). The target-to-envelope
    ratio (k+1) / (k log^2 k) is decreasing in k; dividing by its value at
    K1 gives an acceptance probability in (0, 1] in which both the
    normalizer c and the unknown tail mass cancel, so the draw is exact.
    Acceptance stays above 0.3 out to k ~ 1e12 and the tail is hit about
    once per 7e8 samples, so the per-draw loop costs nothing overall.
    """
    k1 = float(_HEAVY_TABLE_TOP)
    peak = (k1 + 1.0) / (k1 * math.log(k1) ** 2)
    while True:
        u = rng.random()
        if u <= 0.0:
            continue
        k = math.floor(k1 / u)
        accept = (k + 1.0) / (k * math.log(k) ** 2 * peak)
        if rng.random() < accept:
            return float(k)


class HeavyTailOffspring(OffspringLaw):
    """The heavy-tailed law p_k = c k^-2 log^-2 k on k >= 2.

    Its mean is finite (about 3.046) but sum k log k p_k diverges at an
    iterated-logarithm rate, so any truncation of the support would destroy
    exactly the property the dichotomy experiment is built around. Sampling is
    exact inverse-CDF against a fixed table up to k = 2**22, and exact
    rejection sampling beyond it; every integer k >= 2 keeps its true
    probability, with no cap anywhere.
    """

    def __init__(self):
        self.c = _HEAVY_C
        self._mean = None

    def validation_checks(self):
        # The table cannot sum to 1 at any finite size; instead check that the
        # tabulated mass plus the analytic tail integral reproduces 1 to the
        # accuracy float64 accumulation permits.
        cdf = _heavy_base_cdf()
        k_end = len(cdf) + 2
        la = math.log(k_end)
        tail = self.c * float(expn(2, la)) / la
        return [
            (
                "tabulated mass + tail integral = 1",
                bool(abs(float(cdf[-1]) + tail - 1.0) <= 1e-9),
                f"table to k={k_end}",
            )
        ]

    def mean(self):
        """Mean A of the law, summed until the remainder bound is below 1e-10.

        Direct summation alone can never get there (the tail of
        sum 1/(k log^2 k) is ~1/log K), so the tail is bracketed by the
        integral comparison [int_{K+1}, int_K] of dx/(x log^2 x) = d(-1/log x)
        and the bracket midpoint is added. At K = 2**25 the bracket half-width
        is 5e-11; together with the normalizer's own error the result is good
        to well under 1e-10. Cached after the first call.
        """
        if self._mean is None:
            K = _HEAVY_MEAN_CUTOFF
            acc = 0.0
            step = 2**22
            for lo in range(2, K + 1, step):
                acc += float(np.sum(_log_square_terms(lo, min(lo + step, K + 1), 1)))
            tail = 0.5 * (1.0 / math.log(K) + 1.0 / math.log(K + 1))
            self._mean = self.c * (acc + tail)
        return self._mean

    def pmf(self, k):
        if k < 2:
            return 0.0
        return self.c / (k**2 * math.log(k) ** 2)

    def pgf(self, z):
        """Generating function on [0, 1].

        Tabulated terms to k = 2**16 plus the residual mass attached at the
        table end, an overestimate of the true tail by at most the residual
        itself times (1 - z^k) spread, below 1e-11 everywhere on [0, 1].
        """
        K = _HEAVY_Z_CUTOFF
        k = np.arange(2, K, dtype=np.float64)
        terms = self.c / (k**2 * np.log(k) ** 2)
        head = float(np.sum(terms * z**k))
        residual = 1.0 - float(np.sum(terms))
        return head + residual * z**K

    def sample(self, rng, size):
        cdf = _heavy_base_cdf()
        u = rng.random(size)
        out = np.empty(np.shape(u), dtype=np.float64)
        inside = u < cdf[-1]
        out[inside] = np.searchsorted(cdf, u[inside], side="right") + 2
        for i in np.flatnonzero(~inside):
            out[i] = _heavy_tail_draw(rng)
        return out

    def size_biased(self):
        return SizeBiasedHeavyTail(self.c, self.mean())

    def l_value(self, phi_x):
        """Always infinite for phi_x > 0.

        The terms k phi log+(k phi) p_k are eventually at least
        (c phi / 2) / (k log k), whose partial sums grow like log log K
        without bound (integral comparison), so the series diverges for every
        positive phi_x.
        """
        if phi_x <= 0:
            return 0.0
        return math.inf

    def klogk_partial(self, K):
        """Partial sum of k log(k) p_k up to K, by direct summation."""
        if K > 2**27:
            raise ValueError("partial sums this long are not worth materializing")
        k = np.arange(2, K + 1, dtype=np.float64)
        return self.c * float(np.sum(1.0 / (k * np.log(k))))

    def cutoff_exceeding(self, bound):
        """log log of a cutoff K at which the k log k partial sum exceeds `bound`.

        From sum_{k=2}^K 1/(k log k) >= int_2^{K+1} dx/(x log x)
        = log log(K+1) - log log 2, any K with
        log log K >= bound/c + log log 2 guarantees the partial sum of
        k log k p_k is at least `bound`. The cutoff is returned in log-log
        form because for interesting bounds it exceeds every float.
        """
        return bound / self.c + math.log(math.log(2.0))


class SizeBiasedHeavyTail(OffspringLaw):
    """Size-biased companion of the heavy-tailed law: k p_k / A.

    The bias cancels one power of k, leaving (c/A) k^-1 log^-2 k, a law with
    infinite mean whose tail function decays like 1/log. Draws routinely land
    beyond any fixed table, so sampling combines the exact table with analytic
    inversion of the tail integral; the tail draws are reported in log form
    since the magnitudes overflow floats.
    """

    def __init__(self, c, mean_of_base):
        self.ratio = c / mean_of_base
        self._cdf = _tabulated_cdf(1, self.ratio, 2**20)
        # mass the fixed table covers; beyond it the tail integral is inverted
        self._table_top = float(self._cdf[-1])

    def mean(self):
        return math.inf

    def pmf(self, k):
        if k < 2:
            return 0.0
        return self.ratio / (k * math.log(k) ** 2)

    def pgf(self, z):
        if z == 1.0:
            return 1.0
        K = len(self._cdf) + 2
        k = np.arange(2, K, dtype=np.float64)
        terms = self.ratio / (k * np.log(k) ** 2)
        return float(np.sum(terms * z**k)) + (1.0 - self._table_top) * z**K

    def sample_with_log(self, rng, size):
        """Draw (r, log r) pairs; r is inf where the draw overflows float range.

        Uniforms below the tabulated mass use the exact table. Above it, the
        conditional tail is inverted through the integral comparison
        P(K > y) ~ ratio / log y, giving log r = ratio / (1 - u); continuity
        with the table at the splice point holds up to the sandwich width.
        """
        u = rng.random(size)
        r = np.empty(np.shape(u))
        logr = np.empty(np.shape(u))
        inside = u < self._table_top
        if inside.any():
            idx = np.searchsorted(self._cdf, u[inside], side="right") + 2
            r[inside] = idx  # exact integer counts, not exp(log k) round trips
            logr[inside] = np.log(idx)
        out = ~inside
        if out.any():
            tail_log = self.ratio / (1.0 - u[out])
            logr[out] = tail_log
            with np.errstate(over="ignore"):
                r[out] = np.exp(tail_log)
        return r, logr

    def sample(self, rng, size):
        return self.sample_with_log(rng, size)[0]


# --- branching parameters and the assembled model ---------------------------


class BranchingParams:
    """Branching rate beta and offspring law, per state or spatially constant.

    On the finite backend `beta` is a vector and `laws` a list with one law per
    state. On the diffusion backend both are constant: a scalar rate and a
    single law (spatially varying offspring is not supported there).
    """

    def __init__(self, beta, laws):
        if isinstance(laws, OffspringLaw):
            self.beta = float(beta)
            self.laws = laws
            self.spatial = False
            if self.beta < 0:
                raise ValueError("beta must be nonnegative")
        else:
            self.beta = np.asarray(beta, dtype=float)
            self.laws = list(laws)
            self.spatial = True
            if len(self.laws) != len(self.beta):
                raise ValueError("need one offspring law per state")
            self.beta.setflags(write=False)

    def law_at(self, x):
        return self.laws[x] if self.spatial else self.laws

    def beta_at(self, x):
        return self.beta[x] if self.spatial else self.beta

    def mean_vector(self):
        """A(x) for every state (finite backend) or the scalar A."""
        if self.spatial:
            return np.array([law.mean() for law in self.laws])
        return self.laws.mean()

    def beta_max(self):
        return float(np.max(self.beta)) if self.spatial else self.beta

    def growth_weight(self):
        """(A - 1) beta, the additive potential of the expectation semigroup."""
        return (self.mean_vector() - 1.0) * self.beta

    def is_homogeneous(self):
        """True when beta and the law are the same at every state."""
        if not self.spatial:
            return True
        if np.ptp(self.beta) != 0.0:
            return False
        first = self.laws[0]
        return all(law is first or law == first for law in self.laws[1:])


class ModelSpec:
    """A motion plus branching parameters, the full simulation input."""

    def __init__(self, motion, branching, name=None):
        self.motion = motion
        self.branching = branching
        self.name = name

    @property
    def is_finite(self):
        return self.motion.is_finite


class ValidationReport:
    def __init__(self, checks):
        self.checks = list(checks)

    @property
    def ok(self):
        return all(ok for _, ok, _ in self.checks)

    def failures(self):
        return [(name, detail) for name, ok, detail in self.checks if not ok]

    def __repr__(self):
        status = "ok" if self.ok else "FAILED " + ", ".join(n for n, _ in self.failures())
        return f"<ValidationReport {len(self.checks)} checks: {status}>"


def validate_model(spec, eig=None):
    """Run every structural invariant of the model; returns a ValidationReport.

    Malformed containers (non-square generator, NaNs) raise at construction
    time; this function covers the value-level requirements. When an
    eigentriple is supplied the supercriticality requirement lambda1 > 0 is
    included as a check named "growth rate positive".
    """
    checks = list(spec.motion.validation_checks())
    br = spec.branching
    laws = br.laws if br.spatial else [br.laws]
    for i, law in enumerate(laws):
        tag = f"state {i}: " if br.spatial else ""
        if hasattr(law, "validation_checks"):
            checks.extend((tag + n, ok, d) for n, ok, d in law.validation_checks())
        mean = law.mean()
        checks.append((tag + "offspring mean finite and >= 2", bool(2.0 <= mean < math.inf), f"A = {mean}"))
    beta = np.atleast_1d(br.beta)
    checks.append(("beta nonnegative and finite", bool(np.all((beta >= 0) & np.isfinite(beta))), ""))
    if spec.is_finite and br.spatial and len(laws) != spec.motion.n_states:
        checks.append(("one offspring law per state", False, ""))
    if not spec.is_finite and br.spatial:
        checks.append(("diffusion branching spatially constant", False, ""))
    if eig is not None:
        checks.append(
            ("growth rate positive", bool(eig.lambda1 > 0), f"lambda1 = {eig.lambda1}")
        )
    return ValidationReport(checks)


def offspring_mean(law):
    """Mean number of offspring A = sum k p_k; exact for finite laws."""
    return law.mean()


def psi_eval(law, z):
    """Offspring generating function sum p_k z^k on the domain [0, 1]."""
    if not 0.0 <= z <= 1.0:
        raise ValueError("generating function argument must lie in [0, 1]")
    return law.pgf(z)


def size_biased_law(law):
    """The law with probabilities k p_k / A."""
    return law.size_biased()


def sample_offspring(law, rng):
    """One exact inverse-CDF draw from the law."""
    return law.sample_one(rng)


def step_motion(motion, state, rng):
    """Advance the motion by one event.

    Finite chain: one exact jump, returning (holding_time, next_state) with
    next_state None on a kill. Diffusion: one Euler step of length step_dt,
    returning (step_dt, new_position) with None when the particle exits or the
    bridge correction fires.
    """
    if motion.is_finite:
        return motion.jump(state, rng)
    return motion.step_dt, motion.euler_step(state, rng)
