"""Statistical verification suites: Monte Carlo estimates against exact oracles.

Every suite follows the same shape: simulate N replicas through the genealogy
engines, aggregate a statistic, and compare it against a reference computed by
an independent route (matrix exponentials, the nonlinear evolution ODE, exact
combinatorics). Results come back as EstimatorReport objects carrying the
estimate, its standard error, the oracle value, and a z-score verdict.

Determinism contract: replica i draws from streams derived only from
(master_seed, purpose tag, i), work is handed out in fixed-size chunks, and
aggregation is either exact (fsum, integer counts) or permutation invariant
(median, quantiles). Reports are therefore byte-identical for any worker
count.
"""

import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from scipy.linalg import expm
from scipy.stats import chi2 as _chi2

from .genealogy import (
    DEFAULT_N_MAX,
    compute_M,
    compute_eta,
    decorate_uniform_spine,
    population_run,
    project_eta,
    resample_subtrees,
    simulate_diffusion_population,
    simulate_spine_only,
    simulate_tree_P,
    simulate_tree_Qtilde,
    spine_partial_sums,
    spine_rhs,
)
from .rng import (
    TAG_LAPLACE,
    TAG_POPULATION,
    TAG_SPINE,
    TAG_TREE,
    chunk_ranges,
    replica_stream,
    tree_streams,
)
from .spectral import (
    UnsupportedBackendError,
    fk_semigroup,
    llogl_criterion,
    solve_u_equation,
    tilt_motion,
)

__all__ = [
    "InconclusiveError",
    "EstimatorReport",
    "DichotomyReport",
    "many_to_one_test",
    "martingale_mean_test",
    "eta_mean_test",
    "spine_dynamics_test",
    "spine_decomposition_test",
    "change_of_measure_test",
    "laplace_functional_test",
    "dichotomy_experiment",
    "default_functionals",
    "reports_pass",
    "rerun_once",
    "RERUN_OFFSET",
]

PROJECTION_TOL = 1e-10
DECOMP_PASS_FRACTION = 0.98
RERUN_OFFSET = 0x9E3779B9


class InconclusiveError(RuntimeError):
    """The data cannot decide the check (everything overflowed, too few bins)."""


# --- chunked execution --------------------------------------------------------

_ACTIVE = None


def _run_chunk(bounds):
    return _ACTIVE(bounds)


def _map_chunks(chunk_fn, n, workers):
    """Apply chunk_fn to the fixed chunk decomposition of range(n).

    Results come back in chunk order whatever the worker count, so any
    index-ordered aggregation downstream is reproducible. Parallel workers are
    forked, which lets chunk_fn close over unpicklable model objects.
    """
    ranges = chunk_ranges(int(n))
    if workers is None or int(workers) <= 1 or len(ranges) <= 1:
        return [chunk_fn(r) for r in ranges]
    global _ACTIVE
    _ACTIVE = chunk_fn
    try:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=int(workers), mp_context=ctx) as pool:
            return list(pool.map(_run_chunk, ranges))
    finally:
        _ACTIVE = None


# --- reports --------------------------------------------------------------------


class EstimatorReport:
    """Outcome of one statistical check.

    `estimate` and `oracle` are the two routes being compared; `z_score` and
    `p_value` are None for checks whose verdict is not a z-test (pass-fraction
    and exact-match reports). `extra` holds suite-specific diagnostics.
    """

    __slots__ = (
        "name",
        "estimate",
        "std_error",
        "replicas",
        "overflow_count",
        "oracle",
        "z_score",
        "p_value",
        "verdict",
        "extra",
    )

    def __init__(
        self,
        name,
        estimate,
        std_error,
        replicas,
        overflow_count,
        oracle,
        z_score,
        p_value,
        verdict,
        extra=None,
    ):
        self.name = name
        self.estimate = estimate
        self.std_error = std_error
        self.replicas = int(replicas)
        self.overflow_count = int(overflow_count)
        self.oracle = oracle
        self.z_score = z_score
        self.p_value = p_value
        self.verdict = verdict
        self.extra = dict(extra) if extra else {}

    @property
    def passed(self):
        return self.verdict == "pass"

    def to_json(self):
        return {
            "name": self.name,
            "estimate": self.estimate,
            "std_error": self.std_error,
            "replicas": self.replicas,
            "overflow_count": self.overflow_count,
            "oracle": self.oracle,
            "z_score": self.z_score,
            "p_value": self.p_value,
            "verdict": self.verdict,
            "extra": self.extra,
        }

    def __repr__(self):
        return (
            f"<EstimatorReport {self.name}: {self.verdict} "
            f"estimate={self.estimate!r} oracle={self.oracle!r} z={self.z_score!r}>"
        )


def _mean_se(values):
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


def _normal_p(z):
    return math.erfc(abs(z) / math.sqrt(2.0))


def _z_report(name, values, oracle, replicas, overflow_count=0, extra=None):
    """Standard report: sample mean of `values` against an exact oracle."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise InconclusiveError(f"{name}: no valid replicas (all overflowed)")
    mean, se = _mean_se(values)
    if se == 0.0:
        z = 0.0 if mean == oracle else math.inf
    else:
        z = (mean - oracle) / se
    p = _normal_p(z)
    verdict = "pass" if (abs(z) <= 3.0 or p >= 1e-3) else "fail"
    return EstimatorReport(
        name, mean, se, replicas, overflow_count, float(oracle), z, p, verdict, extra
    )


def _finite_values(columns):
    out = columns[np.isfinite(columns)]
    return out


def reports_pass(reports):
    """True when every report in a (possibly nested) result passes."""
    if isinstance(reports, EstimatorReport):
        return reports.passed
    return all(reports_pass(r) for r in reports)


def rerun_once(run_suite, master_seed):
    """Run a suite; on any failed verdict run it once more at a shifted seed.

    Returns (first, second) where second is None when the first run passed.
    A 3-sigma verdict fails about one run in 370, so a single deterministic
    retry keeps false alarms out of exit codes without hiding real defects:
    both results are returned and reported.
    """
    first = run_suite(int(master_seed))
    if reports_pass(first):
        return first, None
    return first, run_suite(int(master_seed) + RERUN_OFFSET)


# --- chi-square helper ----------------------------------------------------------


def _lumped_chi_square(observed, probs):
    """Chi-square statistic after pooling low-expectation categories.

    Categories with expected count below 5 are pooled into one bucket; if the
    bucket still expects fewer than 5 it is merged into the smallest kept
    category. Returns (stat, dof, bins) or None when fewer than two bins
    remain.
    """
    observed = np.asarray(observed, dtype=float)
    probs = np.asarray(probs, dtype=float)
    n = observed.sum()
    expected = n * probs
    keep = expected >= 5.0
    obs_bins = list(observed[keep])
    exp_bins = list(expected[keep])
    rest_o = float(observed[~keep].sum())
    rest_e = float(expected[~keep].sum())
    if rest_e > 0.0:
        if rest_e >= 5.0 or not exp_bins:
            obs_bins.append(rest_o)
            exp_bins.append(rest_e)
        else:
            j = int(np.argmin(exp_bins))
            obs_bins[j] += rest_o
            exp_bins[j] += rest_e
    if len(obs_bins) < 2:
        return None
    stat = math.fsum(
        (o - e) ** 2 / e for o, e in zip(obs_bins, exp_bins)
    )
    return stat, len(obs_bins) - 1, len(obs_bins)


def _chi_square_report(name, stat, dof, replicas, extra=None):
    p = float(_chi2.sf(stat, dof))
    sd = math.sqrt(2.0 * dof)
    z = (stat - dof) / sd
    verdict = "pass" if p >= 1e-3 else "fail"
    return EstimatorReport(
        name, float(stat), sd, replicas, 0, float(dof), z, p, verdict, extra
    )


def _exact_match_report(name, mismatches, replicas, extra=None):
    verdict = "pass" if mismatches == 0 else "fail"
    return EstimatorReport(
        name, float(mismatches), 0.0, replicas, 0, 0.0, None, None, verdict, extra
    )


# --- oracles ---------------------------------------------------------------------


def _integrated_transition(L, T):
    """The integral of exp(sL) over s in [0, T], by the block-matrix identity

        expm(T [[L, I], [0, 0]]) = [[expm(T L), integral], [0, I]].
    """
    L = np.asarray(L, dtype=float)
    n = L.shape[0]
    block = np.zeros((2 * n, 2 * n))
    block[:n, :n] = L
    block[:n, n:] = np.eye(n)
    return expm(T * block)[:n, n:]


def _diffusion_mean_oracle(motion, branching, f, x, T, n_terms=80, n_quad=4001):
    """E_x<f, X_T> for the killed interval diffusion, by eigenexpansion.

    The killed generator has the sine eigenbasis on (a, b); the constant
    branching potential shifts every eigenvalue by (A - 1) beta. The series
    coefficients come from trapezoid quadrature against a smooth f, and terms
    decay like exp(-k^2 t / 2), so truncation error is far below Monte Carlo
    resolution for any T of order one.
    """
    a, b = motion.a, motion.b
    w = b - a
    grow = float(branching.growth_weight())
    ys = np.linspace(a, b, n_quad)
    fy = np.asarray(f(ys), dtype=float)
    total = 0.0
    for k in range(1, n_terms + 1):
        basis = np.sin(k * np.pi * (ys - a) / w)
        coef = (2.0 / w) * np.trapezoid(fy * basis, ys)
        rate = grow - 0.5 * (k * np.pi / w) ** 2
        total += coef * math.exp(rate * T) * math.sin(k * np.pi * (x - a) / w)
    return total


def _population_law(spec, eig):
    """(law, beta) when the population size alone is a Markov process.

    That needs spatially constant branching and a constant eigenfunction, in
    which case M_t = N_t exp(-lambda1 t) and whole-tree simulation is wasted
    effort. Returns None when the per-state engines are required.
    """
    if not spec.is_finite:
        return None
    br = spec.branching
    if not br.is_homogeneous():
        return None
    phi = np.asarray(eig.phi, dtype=float)
    if np.ptp(phi) > 1e-12:
        return None
    return br.law_at(0), float(br.beta_at(0))


def _alive_states(tree):
    return [tree.nodes[lab].position_at_horizon for lab in tree.alive_set]


# --- suites ---------------------------------------------------------------------


def many_to_one_test(spec, eig, f, x, T, N, master_seed=0, workers=1, n_max=DEFAULT_N_MAX):
    """Mean of <f, X_T> over N trees against the expectation semigroup.

    On the finite backend f is a vector over states and the oracle is a row of
    expm(T * fk_matrix) applied to it; on the diffusion backend f is a
    callable and the oracle is the sine eigenexpansion. A sequence of test
    functions shares one set of simulated trees and yields a list of reports
    in the same order.
    """
    N = int(N)
    if spec.is_finite:
        single = np.asarray(f, dtype=float).ndim == 1
        fmat = np.atleast_2d(np.asarray(f, dtype=float))
        row = fk_semigroup(spec.motion, spec.branching, T)[x]
        oracles = [float(row @ fvec) for fvec in fmat]
        k = len(fmat)

        def chunk(bounds):
            lo, hi = bounds
            vals = np.empty((hi - lo, k))
            over = 0
            for i in range(lo, hi):
                tree = simulate_tree_P(spec, x, T, tree_streams(master_seed, TAG_TREE, i), n_max)
                if tree.overflowed:
                    vals[i - lo] = math.nan
                    over += 1
                else:
                    states = _alive_states(tree)
                    vals[i - lo] = [
                        math.fsum(float(fvec[s]) for s in states) for fvec in fmat
                    ]
            return vals, over

    else:
        single = callable(f)
        fns = [f] if single else list(f)
        oracles = [
            _diffusion_mean_oracle(spec.motion, spec.branching, fn, x, T) for fn in fns
        ]
        k = len(fns)

        def chunk(bounds):
            lo, hi = bounds
            g = replica_stream(master_seed, TAG_TREE, lo)
            rep, pos, overflowed = simulate_diffusion_population(
                spec.motion, spec.branching, x, T, g, hi - lo, n_max
            )
            vals = np.empty((hi - lo, k))
            for j, fn in enumerate(fns):
                weights = np.asarray(fn(pos), dtype=float) if len(pos) else np.empty(0)
                vals[:, j] = np.bincount(rep, weights=weights, minlength=hi - lo)
            vals[overflowed] = math.nan
            return vals, int(overflowed.sum())

    parts = _map_chunks(chunk, N, workers)
    values = np.concatenate([p[0] for p in parts], axis=0)
    overflow = int(sum(p[1] for p in parts))
    reports = [
        _z_report(
            "many_to_one" if single else f"many_to_one[{j}]",
            _finite_values(values[:, j]),
            oracles[j],
            N,
            overflow,
            extra={"T": float(T), "model": spec.name},
        )
        for j in range(len(oracles))
    ]
    return reports[0] if single else reports


def _martingale_matrix(spec, eig, x, T_grid, N, master_seed, workers, n_max):
    """Per-replica additive martingale values at every horizon in T_grid.

    Returns (values, overflow) arrays of shape (N, len(T_grid)); overflowed
    entries hold NaN in values. A homogeneous model with constant phi runs the
    coupled population engine (one trajectory read at all horizons); otherwise
    horizons are simulated independently tree by tree.
    """
    ts = np.asarray(T_grid, dtype=float)
    lam = eig.lambda1
    pop = _population_law(spec, eig)
    if pop is not None:
        law, beta = pop
        discount = np.exp(-lam * ts)

        def chunk(bounds):
            lo, hi = bounds
            vals = np.empty((hi - lo, len(ts)))
            over = np.zeros((hi - lo, len(ts)), dtype=bool)
            for i in range(lo, hi):
                g = replica_stream(master_seed, TAG_POPULATION, i)
                sizes, overflowed = population_run(law, beta, ts, g, n_max)
                row = sizes * discount
                row[overflowed] = math.nan
                vals[i - lo] = row
                over[i - lo] = overflowed
            return vals, over

    elif spec.is_finite:

        def chunk(bounds):
            lo, hi = bounds
            vals = np.empty((hi - lo, len(ts)))
            over = np.zeros((hi - lo, len(ts)), dtype=bool)
            for i in range(lo, hi):
                for j, T in enumerate(ts):
                    st = tree_streams(master_seed, TAG_TREE, j * int(N) + i)
                    tree = simulate_tree_P(spec, x, float(T), st, n_max)
                    track = compute_M(tree, eig)
                    vals[i - lo, j] = track.M if track.valid else math.nan
                    over[i - lo, j] = not track.valid
            return vals, over

    else:
        phi_x = float(eig.phi_at(x))

        def chunk(bounds):
            lo, hi = bounds
            vals = np.empty((hi - lo, len(ts)))
            over = np.zeros((hi - lo, len(ts)), dtype=bool)
            for j, T in enumerate(ts):
                g = replica_stream(master_seed, TAG_TREE, j * int(N) + lo)
                rep, pos, overflowed = simulate_diffusion_population(
                    spec.motion, spec.branching, x, float(T), g, hi - lo, n_max
                )
                weights = np.asarray(eig.phi(pos), dtype=float) if len(pos) else np.empty(0)
                col = np.bincount(rep, weights=weights, minlength=hi - lo)
                col *= math.exp(-lam * T) / phi_x
                col[overflowed] = math.nan
                vals[:, j] = col
                over[:, j] = overflowed
            return vals, over

    parts = _map_chunks(chunk, int(N), workers)
    values = np.concatenate([p[0] for p in parts], axis=0)
    over = np.concatenate([p[1] for p in parts], axis=0)
    return values, over


def martingale_mean_test(spec, eig, x, T_grid, N, master_seed=0, workers=1, n_max=DEFAULT_N_MAX):
    """E[M_T] = 1 at every horizon; one report per horizon.

    The sample median rides along in extra: for laws without L log L the mean
    stays 1 by martingale property while the median collapses, and seeing
    both in one report is the quickest sanity read.
    """
    N = int(N)
    values, _ = _martingale_matrix(spec, eig, x, T_grid, N, master_seed, workers, n_max)
    reports = []
    for j, T in enumerate(np.asarray(T_grid, dtype=float)):
        col = values[:, j]
        finite = _finite_values(col)
        overflow = int(N - finite.size)
        extra = {
            "T": float(T),
            "model": spec.name,
            "median": float(np.median(finite)) if finite.size else None,
        }
        reports.append(
            _z_report(f"martingale_mean[T={T:g}]", finite, 1.0, N, overflow, extra)
        )
    return reports


def eta_mean_test(spec, eig, x, T, N, master_seed=0, workers=1, n_max=DEFAULT_N_MAX):
    """Mean spine density along a uniformly chosen line of descent.

    Each replica grows a plain tree, walks down by uniform child choices, and
    evaluates the density product; a walk that dies before the horizon
    contributes 0. The projection identity (leaf-weighted density average
    equals the additive martingale) is checked on every tree as it goes by,
    and a single violation beyond 1e-10 fails the report regardless of the
    z-score.
    """
    N = int(N)

    def chunk(bounds):
        lo, hi = bounds
        vals = np.empty(hi - lo)
        over = 0
        dead = 0
        worst = 0.0
        for i in range(lo, hi):
            st = tree_streams(master_seed, TAG_TREE, i)
            tree = simulate_tree_P(spec, x, T, st, n_max)
            if tree.overflowed:
                vals[i - lo] = math.nan
                over += 1
                continue
            track = compute_M(tree, eig)
            dev = abs(project_eta(tree, spec, eig) - track.M)
            if dev > worst:
                worst = dev
            dec = decorate_uniform_spine(tree, st.named(b"uniform-walk"))
            if dec is None:
                vals[i - lo] = 0.0
                dead += 1
            else:
                vals[i - lo] = compute_eta(tree, dec, spec, eig).eta
        return vals, over, dead, worst

    parts = _map_chunks(chunk, N, workers)
    values = np.concatenate([p[0] for p in parts])
    overflow = int(sum(p[1] for p in parts))
    dead = int(sum(p[2] for p in parts))
    worst = max(p[3] for p in parts)
    report = _z_report(
        "eta_mean",
        _finite_values(values),
        1.0,
        N,
        overflow,
        extra={
            "T": float(T),
            "model": spec.name,
            "dead_walks": dead,
            "worst_projection_dev": float(worst),
            "projection_tol": PROJECTION_TOL,
        },
    )
    if worst > PROJECTION_TOL:
        report.verdict = "fail"
    return report


def _offspring_categories(law, max_atom=11):
    """(labels, probs, degenerate) binning of an offspring law for chi-square.

    Finite-support laws keep their exact atoms. Unbounded laws keep atoms up
    to max_atom and pool the rest into one tail bucket, whose probability is
    the exact complement.
    """
    if hasattr(law, "support"):
        ks = [int(k) for k in law.support]
        ps = [float(p) for p in law.probs]
        degenerate = math.isclose(max(ps), 1.0, abs_tol=1e-12)
        return ks, ps, None, degenerate
    ks = list(range(2, max_atom + 1))
    ps = [law.pmf(k) for k in ks]
    tail = 1.0 - math.fsum(ps)
    return ks, ps, tail, False


def spine_dynamics_test(spec, eig, tilt, x, T, N, master_seed=0, workers=1):
    """Three checks of the size-biased spine law from N spine-only runs.

    1. The spine's state at T against the tilted chain's exact transition row
       (chi-square).
    2. The mean number of fissions against the integrated fission intensity
       along the tilted chain, computed by a block matrix exponential.
    3. The pooled offspring counts at fission events against the size-biased
       law of the fission state (chi-square per state, statistics summed;
       states whose size-biased law is deterministic are checked by exact
       match instead).
    """
    if not spec.is_finite:
        raise UnsupportedBackendError("spine dynamics checks need the finite backend")
    N = int(N)
    n_states = spec.motion.n_states
    branching = spec.branching

    def chunk(bounds):
        lo, hi = bounds
        ends = np.zeros(n_states, dtype=np.int64)
        nfiss = np.empty(hi - lo, dtype=np.int64)
        pooled = {}
        for i in range(lo, hi):
            dec = simulate_spine_only(spec, eig, tilt, x, T, tree_streams(master_seed, TAG_SPINE, i))
            ends[dec.end_state] += 1
            nfiss[i - lo] = dec.n_fissions
            for s, r in zip(dec.fission_states, dec.offspring_counts):
                key = int(r) if r < 2**62 else 2**62
                bucket = pooled.setdefault(int(s), {})
                bucket[key] = bucket.get(key, 0) + 1
        return ends, nfiss, pooled

    parts = _map_chunks(chunk, N, workers)
    ends = np.sum([p[0] for p in parts], axis=0)
    nfiss = np.concatenate([p[1] for p in parts]).astype(float)
    pooled = {}
    for p in parts:
        for s, bucket in p[2].items():
            tgt = pooled.setdefault(s, {})
            for k, c in bucket.items():
                tgt[k] = tgt.get(k, 0) + c

    marginal_probs = tilt.transition(T)[x]
    lumped = _lumped_chi_square(ends, marginal_probs)
    if lumped is None:
        raise InconclusiveError("spine marginal: fewer than two usable bins")
    stat, dof, bins = lumped
    marginal = _chi_square_report(
        "spine_marginal",
        stat,
        dof,
        N,
        extra={"T": float(T), "model": spec.name, "bins": bins, "counts": [int(c) for c in ends]},
    )

    means = np.broadcast_to(np.asarray(branching.mean_vector(), dtype=float), (n_states,))
    betas = np.broadcast_to(np.asarray(branching.beta, dtype=float), (n_states,))
    intensity = means * betas
    oracle = float(_integrated_transition(tilt.generator_phi, T)[x] @ intensity)
    fission = _z_report(
        "spine_fission_mean",
        nfiss,
        oracle,
        N,
        extra={"T": float(T), "model": spec.name},
    )

    total_fissions = sum(sum(b.values()) for b in pooled.values())
    stat = 0.0
    dof = 0
    mismatches = 0
    checked = []
    skipped = []
    for s in sorted(pooled):
        bucket = pooled[s]
        n_s = sum(bucket.values())
        ks, ps, tail, degenerate = _offspring_categories(branching.law_at(s).size_biased())
        if degenerate:
            atom = ks[int(np.argmax(ps))]
            mismatches += sum(c for k, c in bucket.items() if k != atom)
            checked.append(s)
            continue
        observed = [bucket.get(k, 0) for k in ks]
        probs = list(ps)
        if tail is not None:
            observed.append(sum(c for k, c in bucket.items() if k > ks[-1]))
            probs.append(tail)
        lumped = _lumped_chi_square(observed, probs)
        if lumped is None:
            skipped.append(s)
            continue
        st_s, dof_s, _ = lumped
        stat += st_s
        dof += dof_s
        checked.append(s)
    extra = {
        "T": float(T),
        "model": spec.name,
        "pooled_fissions": int(total_fissions),
        "states_checked": checked,
        "states_skipped": skipped,
        "mismatches": int(mismatches),
    }
    if dof > 0:
        size_bias = _chi_square_report("spine_size_bias", stat, dof, N, extra)
        if mismatches:
            size_bias.verdict = "fail"
    elif checked:
        size_bias = _exact_match_report("spine_size_bias", mismatches, N, extra)
    else:
        raise InconclusiveError("size-bias check: no state had two usable bins")
    return [marginal, fission, size_bias]


def spine_decomposition_test(
    spec, eig, tilt, x, T, R, S, master_seed=0, workers=1, n_max=DEFAULT_N_MAX
):
    """Conditional decomposition of the martingale given the spine.

    For each of R frozen spines, S independently resampled subtree fillings
    give Monte Carlo values of phi(x) M_T whose conditional mean must equal
    the spine's terminal-plus-fissions sum. Spines with no fissions have zero
    conditional variance and are held to exact equality (up to roundoff);
    the rest use a 3 sigma band. The report's estimate is the fraction of
    spines in band.
    """
    R = int(R)
    S = int(S)
    phi_x = float(eig.phi_at(x))

    def chunk(bounds):
        lo, hi = bounds
        flags = np.empty(hi - lo, dtype=np.int64)
        resample_over = 0
        exact_branch = 0
        for r in range(lo, hi):
            st = tree_streams(master_seed, TAG_SPINE, r)
            dec = simulate_spine_only(spec, eig, tilt, x, T, st)
            rhs = spine_rhs(dec, eig)
            vals = []
            for s in range(1, S + 1):
                tree = resample_subtrees(spec, dec, st.with_round(s), n_max)
                track = compute_M(tree, eig)
                if track.valid:
                    vals.append(phi_x * track.M)
                else:
                    resample_over += 1
            if not vals:
                flags[r - lo] = -1
                continue
            if min(vals) == max(vals):
                # Zero conditional variance (no fissions): identity must hold
                # outright. Dividing fsum by S can shift the mean a last-place
                # unit, so compare the common value itself, not the mean.
                exact_branch += 1
                ok = abs(vals[0] - rhs) <= 1e-12 * max(1.0, abs(rhs))
            else:
                mean, se = _mean_se(vals)
                ok = abs(mean - rhs) <= 3.0 * se
            flags[r - lo] = 1 if ok else 0
        return flags, resample_over, exact_branch

    parts = _map_chunks(chunk, R, workers)
    flags = np.concatenate([p[0] for p in parts])
    resample_over = int(sum(p[1] for p in parts))
    exact_branch = int(sum(p[2] for p in parts))
    dropped = int(np.sum(flags == -1))
    kept = R - dropped
    if kept == 0:
        raise InconclusiveError("spine decomposition: every spine lost all resamples")
    passed = int(np.sum(flags == 1))
    frac = passed / kept
    se = math.sqrt(frac * (1.0 - frac) / kept)
    verdict = "pass" if frac >= DECOMP_PASS_FRACTION else "fail"
    return EstimatorReport(
        "spine_decomposition",
        frac,
        se,
        R,
        dropped,
        None,
        None,
        None,
        verdict,
        extra={
            "T": float(T),
            "model": spec.name,
            "resamples": S,
            "threshold": DECOMP_PASS_FRACTION,
            "zero_variance_spines": exact_branch,
            "resample_overflow": resample_over,
        },
    )


def default_functionals():
    """Bounded tree functionals for two-measure comparisons."""
    return [
        ("one", lambda tree: 1.0),
        ("pop_min_50", lambda tree: float(min(len(tree.alive_set), 50))),
        ("pop_ge_3", lambda tree: 1.0 if len(tree.alive_set) >= 3 else 0.0),
    ]


def change_of_measure_test(
    spec, eig, tilt, x, T, N, functionals=None, master_seed=0, workers=1, n_max=DEFAULT_N_MAX
):
    """E_P[M_T F] against E under the size-biased measure of F, per functional.

    Both sides are Monte Carlo, so the z-score uses the combined standard
    error. F must be a functional of the plain tree (the spine marks on the
    size-biased side are ignored by the comparison).
    """
    if functionals is None:
        functionals = default_functionals()
    N = int(N)
    names = [name for name, _ in functionals]
    fns = [fn for _, fn in functionals]
    k = len(fns)

    def chunk_p(bounds):
        lo, hi = bounds
        vals = np.empty((hi - lo, k))
        over = 0
        for i in range(lo, hi):
            tree = simulate_tree_P(spec, x, T, tree_streams(master_seed, TAG_TREE, i), n_max)
            track = compute_M(tree, eig)
            if not track.valid:
                vals[i - lo] = math.nan
                over += 1
                continue
            vals[i - lo] = [track.M * fn(tree) for fn in fns]
        return vals, over

    def chunk_q(bounds):
        lo, hi = bounds
        vals = np.empty((hi - lo, k))
        over = 0
        for i in range(lo, hi):
            tree, _ = simulate_tree_Qtilde(
                spec, eig, tilt, x, T, tree_streams(master_seed, TAG_SPINE, i), n_max
            )
            if tree.overflowed:
                vals[i - lo] = math.nan
                over += 1
                continue
            vals[i - lo] = [fn(tree) for fn in fns]
        return vals, over

    parts_p = _map_chunks(chunk_p, N, workers)
    parts_q = _map_chunks(chunk_q, N, workers)
    p_vals = np.concatenate([p[0] for p in parts_p], axis=0)
    q_vals = np.concatenate([p[0] for p in parts_q], axis=0)
    over_p = int(sum(p[1] for p in parts_p))
    over_q = int(sum(p[1] for p in parts_q))
    reports = []
    for j, name in enumerate(names):
        pj = _finite_values(p_vals[:, j])
        qj = _finite_values(q_vals[:, j])
        if pj.size == 0 or qj.size == 0:
            raise InconclusiveError(f"change of measure[{name}]: a side lost every replica")
        p_mean, p_se = _mean_se(pj)
        q_mean, q_se = _mean_se(qj)
        se = math.sqrt(p_se**2 + q_se**2)
        diff = p_mean - q_mean
        if se == 0.0:
            z = 0.0 if diff == 0.0 else math.inf
        else:
            z = diff / se
        p = _normal_p(z)
        verdict = "pass" if (abs(z) <= 3.0 or p >= 1e-3) else "fail"
        reports.append(
            EstimatorReport(
                f"change_of_measure[{name}]",
                p_mean,
                se,
                N,
                over_p + over_q,
                q_mean,
                z,
                p,
                verdict,
                extra={
                    "T": float(T),
                    "model": spec.name,
                    "plain_se": p_se,
                    "biased_se": q_se,
                    "overflow_plain": over_p,
                    "overflow_biased": over_q,
                },
            )
        )
    return reports


def laplace_functional_test(spec, eig, x, f, T, N, master_seed=0, workers=1, n_max=DEFAULT_N_MAX):
    """Mean of exp(-<f, X_T>) against the nonlinear evolution ODE.

    The oracle integrates du/ds = (killed generator) u + beta (psi(u) - u)
    from u_0 = exp(-f); with f = 0 both routes are exactly 1 and the report
    reduces to an exact-equality check.
    """
    if not spec.is_finite:
        raise UnsupportedBackendError("the Laplace functional oracle needs the finite backend")
    N = int(N)
    fvec = np.asarray(f, dtype=float)
    oracle = float(solve_u_equation(spec.motion, spec.branching, fvec, T)[x])

    def chunk(bounds):
        lo, hi = bounds
        vals = np.empty(hi - lo)
        over = 0
        for i in range(lo, hi):
            tree = simulate_tree_P(spec, x, T, tree_streams(master_seed, TAG_LAPLACE, i), n_max)
            if tree.overflowed:
                vals[i - lo] = math.nan
                over += 1
            else:
                vals[i - lo] = math.exp(-math.fsum(float(fvec[s]) for s in _alive_states(tree)))
        return vals, over

    parts = _map_chunks(chunk, N, workers)
    values = np.concatenate([p[0] for p in parts])
    overflow = int(sum(p[1] for p in parts))
    return _z_report(
        "laplace_functional",
        _finite_values(values),
        oracle,
        N,
        overflow,
        extra={"T": float(T), "model": spec.name},
    )


# --- dichotomy -------------------------------------------------------------------


class DichotomyReport:
    """Per-horizon martingale statistics next to the exact integral verdict.

    Rows hold, for each horizon: mean and median of M_T over replicas that
    stayed under the particle cap, the fraction of all replicas with
    M_T < eps, and the overflow count. Replicas past the cap are provably
    above eps (the cap times the discount exceeds eps; checked up front), so
    the fraction column is exact while mean and median are conditional on not
    overflowing. Spine growth quantiles give the size-biased view of the same
    dichotomy: the running maximum of the spine's fission terms stays bounded
    exactly when the criterion integral is finite.
    """

    def __init__(
        self, label, criterion, eps, replicas, horizons, rows, spine_quantiles, master_seed
    ):
        self.label = label
        self.criterion = criterion
        self.eps = float(eps)
        self.replicas = int(replicas)
        self.horizons = [float(t) for t in horizons]
        self.rows = rows
        self.spine_quantiles = spine_quantiles
        self.master_seed = int(master_seed)

    def to_json(self):
        return {
            "label": self.label,
            "criterion": self.criterion.to_json(),
            "eps": self.eps,
            "replicas": self.replicas,
            "seed": self.master_seed,
            "horizons": self.horizons,
            "rows": self.rows,
            "spine_log_max_quantiles": self.spine_quantiles,
        }

    def csv_rows(self):
        """Header plus one row per horizon, ready for csv.writer."""
        out = [["T", "mean", "median", "frac_below_eps", "overflow", "criterion_finite"]]
        fin = self.criterion.finite
        for row in self.rows:
            out.append(
                [
                    row["T"],
                    row["mean"],
                    row["median"],
                    row["frac_below_eps"],
                    row["overflow"],
                    fin,
                ]
            )
        return out

    def __repr__(self):
        tag = "Finite" if self.criterion.finite else "Diverges"
        return f"<DichotomyReport {self.label}: {len(self.rows)} horizons, criterion {tag}>"


def dichotomy_experiment(
    spec,
    eig,
    x,
    T_grid,
    N,
    master_seed=0,
    workers=1,
    eps=0.01,
    n_max=DEFAULT_N_MAX,
    spine_replicas=1000,
):
    """Empirical martingale decay profile next to the exact criterion verdict.

    Simulates N population trajectories, reads M_T on the horizon grid, and
    attaches the integral criterion computed from the spectral data alone.
    The grid must be strictly increasing. Also runs spine-only simulations to
    the last horizon and records quartiles of the log running maximum of the
    fission terms at every grid point.
    """
    ts = [float(t) for t in T_grid]
    if not ts:
        raise ValueError("horizon grid is empty")
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError("horizon grid must be strictly increasing")
    if not spec.is_finite:
        raise UnsupportedBackendError("the dichotomy experiment needs the finite backend")
    N = int(N)
    lam = eig.lambda1
    phi = np.asarray(eig.phi, dtype=float)
    criterion = llogl_criterion(spec.branching, eig, spec.motion.measure)
    tilt = tilt_motion(spec.motion, spec.branching, eig)

    cap_floor = n_max * math.exp(-lam * ts[-1]) * float(phi.min()) / float(phi[x])
    if cap_floor <= eps:
        raise InconclusiveError(
            "particle cap too low: an overflowed replica could still be below eps"
        )

    values, over = _martingale_matrix(spec, eig, x, ts, N, master_seed, workers, n_max)

    rows = []
    for j, T in enumerate(ts):
        col = values[:, j]
        finite = _finite_values(col)
        n_over = int(over[:, j].sum())
        below = int(np.sum(finite < eps))
        rows.append(
            {
                "T": T,
                "mean": float(math.fsum(finite) / finite.size) if finite.size else None,
                "median": float(np.median(finite)) if finite.size else None,
                "frac_below_eps": below / N,
                "overflow": n_over,
            }
        )

    def spine_chunk(bounds):
        lo, hi = bounds
        out = np.empty((hi - lo, len(ts)))
        for i in range(lo, hi):
            dec = simulate_spine_only(
                spec, eig, tilt, x, ts[-1], tree_streams(master_seed, TAG_SPINE, i)
            )
            sums = spine_partial_sums(dec, eig)
            times = np.asarray(dec.fission_times, dtype=float)
            for j, T in enumerate(ts):
                idx = int(np.searchsorted(times, T, side="right")) - 1
                out[i - lo, j] = sums.log_running_max[idx] if idx >= 0 else -math.inf
        return out

    spine_parts = _map_chunks(spine_chunk, int(spine_replicas), workers)
    spine_vals = np.concatenate(spine_parts, axis=0)
    # order statistics, not interpolation: columns may contain -inf (spines
    # with no fission yet) and interpolating between two -inf gives NaN
    qs = np.quantile(spine_vals, [0.25, 0.5, 0.75], axis=0, method="lower")
    spine_quantiles = {
        "T": ts,
        "q25": [float(v) for v in qs[0]],
        "q50": [float(v) for v in qs[1]],
        "q75": [float(v) for v in qs[2]],
    }

    return DichotomyReport(
        spec.name or "model",
        criterion,
        eps,
        N,
        ts,
        rows,
        spine_quantiles,
        master_seed,
    )
