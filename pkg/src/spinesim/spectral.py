"""Exact oracles: expectation semigroup, principal eigentriple, tilted spine
motion, the L log L criterion integral, and the nonlinear log-Laplace ODE.

Everything here is deterministic numerics. The simulation and verification
modules treat these outputs as ground truth, so the methods are deliberately
boring: dense matrix exponentials, Perron power iteration, fixed-step RK4.
"""

import math

import numpy as np
from scipy.linalg import expm

from .model import FiniteChainMotion, KilledDiffusion1D


class SpectralError(RuntimeError):
    """A numeric post-condition of a spectral computation failed."""


class UnsupportedBackendError(TypeError):
    """Operation not defined for this motion backend."""


class SupercriticalityError(ValueError):
    """The growth rate lambda1 is not strictly positive."""


# --- expectation semigroup ---------------------------------------------------


def _growth_vector(motion, branching):
    gw = branching.growth_weight()
    if np.ndim(gw) == 0:
        return np.full(motion.n_states, float(gw))
    return np.asarray(gw, dtype=float)


def fk_matrix(motion, branching):
    """Generator of the expectation semigroup: killed motion plus (A-1)beta."""
    if not motion.is_finite:
        raise UnsupportedBackendError("expectation semigroup matrix needs a finite chain")
    return motion.generator + np.diag(_growth_vector(motion, branching))


def fk_semigroup(motion, branching, t):
    """exp(t * fk_matrix), the linear expectation operator over horizon t.

    Entries must be strictly positive for t > 0 (irreducibility of the
    underlying chain); violation raises SpectralError.
    """
    if t < 0:
        raise ValueError("horizon must be nonnegative")
    out = expm(t * fk_matrix(motion, branching))
    if t > 0 and out.min() <= 0.0:
        raise SpectralError("semigroup has a nonpositive entry at t > 0")
    return out


# --- principal eigentriple ---------------------------------------------------


class Eigentriple:
    """Growth rate lambda1 with right eigenvector phi and left phi_tilde.

    Normalization: sum(phi * phi_tilde * m) = 1 and max|phi| = 1 on the
    finite backend. On the diffusion backend phi and phi_tilde are callables
    (the Dirichlet sine pair). Construction does not validate; see
    eigentriple_checks.
    """

    def __init__(self, lambda1, phi, phi_tilde, backend, phi_sq_mass=None, gap=None):
        self.lambda1 = float(lambda1)
        self.phi = phi
        self.phi_tilde = phi_tilde
        self.backend = backend
        self.phi_sq_mass = phi_sq_mass
        self.gap = gap

    def phi_at(self, x):
        if self.backend == "finite":
            return self.phi[x]
        return self.phi(x)

    def phi_tilde_at(self, x):
        if self.backend == "finite":
            return self.phi_tilde[x]
        return self.phi_tilde(x)

    def to_json(self):
        if self.backend == "finite":
            return {
                "lambda1": self.lambda1,
                "phi": list(map(float, self.phi)),
                "phi_tilde": list(map(float, self.phi_tilde)),
            }
        a, b = self.interval
        return {
            "lambda1": self.lambda1,
            "phi": {"form": "dirichlet-sine", "interval": [a, b]},
            "phi_tilde": {"form": "dirichlet-sine-normalized", "interval": [a, b]},
        }

    def __repr__(self):
        return f"<Eigentriple lambda1={self.lambda1:.6g} backend={self.backend}>"


def _power_pair(B, tol_value=1e-13, tol_vec=1e-12, max_iter=20000):
    """Dominant right and left eigenvectors of B by plain power iteration.

    Seeded with the all-ones vector; converged when successive Rayleigh
    quotients move by less than tol_value and the normalized iterate by less
    than tol_vec in sup norm. Returns (rho, right, left) with rho the
    two-sided Rayleigh quotient.
    """

    def iterate(mat):
        v = np.ones(mat.shape[0])
        v /= np.linalg.norm(v)
        ray_prev = math.inf
        for _ in range(max_iter):
            w = mat @ v
            nrm = np.linalg.norm(w)
            if nrm == 0.0:
                raise SpectralError("power iteration hit the zero vector")
            w /= nrm
            ray = float(w @ (mat @ w)) / float(w @ w)
            if abs(ray - ray_prev) < tol_value and np.max(np.abs(w - v)) < tol_vec:
                v = w
                break
            v, ray_prev = w, ray
        else:
            raise SpectralError("power iteration did not converge")
        if v.sum() < 0:
            v = -v
        if v.min() <= 0:
            raise SpectralError("dominant eigenvector is not strictly positive")
        return v

    right = iterate(B)
    left = iterate(B.T)
    rho = float(left @ B @ right) / float(left @ right)
    return rho, right, left


def principal_eigentriple(motion, branching):
    """Compute (lambda1, phi, phi_tilde) for the expectation semigroup.

    Finite backend: Perron pair of exp(fk_matrix) by power iteration.
    Diffusion backend: the analytic Dirichlet pair, which requires beta and
    the offspring law to be spatially constant.
    """
    if motion.is_finite:
        M = fk_matrix(motion, branching)
        rho, right, left = _power_pair(expm(M))
        lam1 = math.log(rho)
        m = motion.measure
        phi = right / np.max(np.abs(right))
        phi_tilde = left / float(np.sum(phi * left * m))
        eigvals = np.sort_complex(np.linalg.eigvals(M))[::-1]
        gap = float(lam1 - eigvals[1].real) if len(eigvals) > 1 else None
        eig = Eigentriple(
            lam1,
            phi,
            phi_tilde,
            "finite",
            phi_sq_mass=float(np.sum(phi * phi * m)),
            gap=gap,
        )
    else:
        if not isinstance(motion, KilledDiffusion1D):
            raise UnsupportedBackendError(f"unknown motion backend {type(motion)!r}")
        if not branching.is_homogeneous():
            raise UnsupportedBackendError(
                "diffusion backend needs spatially constant beta and offspring law"
            )
        a, b = motion.a, motion.b
        width = b - a
        beta = branching.beta_max()
        mean = branching.mean_vector()
        mean = float(mean if np.ndim(mean) == 0 else mean[0])
        lam1 = (mean - 1.0) * beta - math.pi**2 / (2.0 * width**2)
        scale = 2.0 / width

        def phi(x):
            return np.sin(math.pi * (np.asarray(x) - a) / width)

        def phi_tilde(x):
            return scale * np.sin(math.pi * (np.asarray(x) - a) / width)

        gap = 3.0 * math.pi**2 / (2.0 * width**2)
        eig = Eigentriple(lam1, phi, phi_tilde, "diffusion", phi_sq_mass=width / 2.0, gap=gap)
        eig.interval = (a, b)
    if eig.lambda1 <= 0:
        raise SupercriticalityError(
            f"growth rate lambda1 = {eig.lambda1:.6g} is not positive; "
            "the model is not supercritical"
        )
    return eig


def eigentriple_checks(motion, branching, eig, ts=(0.5, 1.0, 2.0)):
    """Value-level invariants of an eigentriple, as (name, ok, detail) rows.

    Used by the verification suites to reject a bad or tampered triple before
    any simulation is compared against it.
    """
    checks = []
    checks.append(
        (
            "growth rate positive",
            eig.lambda1 > 0,
            f"lambda1 = {eig.lambda1:.6g}",
        )
    )
    if eig.backend == "finite":
        m = motion.measure
        phi = np.asarray(eig.phi, dtype=float)
        phi_tilde = np.asarray(eig.phi_tilde, dtype=float)
        checks.append(("phi strictly positive", bool(phi.min() > 0), f"min {phi.min():.3g}"))
        checks.append(
            (
                "phi_tilde strictly positive",
                bool(phi_tilde.min() > 0),
                f"min {phi_tilde.min():.3g}",
            )
        )
        pairing = float(np.sum(phi * phi_tilde * m))
        checks.append(
            (
                "phi phi_tilde m-pairing is 1",
                abs(pairing - 1.0) < 1e-10,
                f"pairing {pairing:.12g}",
            )
        )
        sup = float(np.max(np.abs(phi)))
        checks.append(("phi sup norm is 1", abs(sup - 1.0) < 1e-10, f"sup {sup:.12g}"))
        worst = 0.0
        for t in ts:
            resid = math.exp(-eig.lambda1 * t) * (fk_semigroup(motion, branching, t) @ phi) - phi
            worst = max(worst, float(np.max(np.abs(resid))))
        checks.append(
            (
                "eigenvector invariance under the semigroup",
                worst < 1e-8,
                f"worst residual {worst:.3g} over t in {tuple(ts)}",
            )
        )
    return checks


# --- tilted spine motion -----------------------------------------------------


class TiltedDiffusion1D:
    """Diffusion conditioned to stay in (a, b): unit noise plus drift phi'/phi.

    Euler steps that would leave the interval are redrawn; under the tilt the
    exit probability per step is tiny, so rejection costs nothing and keeps
    the step law a clean conditional Gaussian.
    """

    is_finite = False

    def __init__(self, a, b, step_dt):
        self.a = float(a)
        self.b = float(b)
        self.step_dt = float(step_dt)
        self._scale = math.pi / (self.b - self.a)

    def drift(self, x):
        return self._scale / np.tan(self._scale * (np.asarray(x) - self.a))

    def euler_step(self, x, rng):
        mu = x + self.drift(x) * self.step_dt
        sd = math.sqrt(self.step_dt)
        for _ in range(1000):
            x1 = mu + sd * rng.standard_normal()
            if self.a < x1 < self.b:
                return x1
        raise SpectralError("tilted diffusion step rejected 1000 times")

    def euler_step_many(self, x, rng):
        """Vectorized step for an array of positions, with per-point redraws."""
        mu = x + self.drift(x) * self.step_dt
        sd = math.sqrt(self.step_dt)
        x1 = mu + sd * rng.standard_normal(x.shape)
        bad = (x1 <= self.a) | (x1 >= self.b)
        for _ in range(1000):
            if not bad.any():
                return x1
            x1[bad] = mu[bad] + sd * rng.standard_normal(int(bad.sum()))
            bad = (x1 <= self.a) | (x1 >= self.b)
        raise SpectralError("tilted diffusion step rejected 1000 times")


class TiltedMotion:
    """Spine motion after the h-transform by phi.

    Finite backend: a conservative chain with generator
    (generator_phi)_{xy} = phi(y) fk_matrix_{xy} / phi(x) off the diagonal and
    zero row sums, plus its stationary law phi*phi_tilde*m. Diffusion
    backend: Brownian motion with drift (log phi)'.
    """

    def __init__(self, backend, generator_phi, motion, stationary):
        self.backend = backend
        self.generator_phi = generator_phi
        self.motion = motion
        self.stationary = stationary

    def transition(self, t):
        if self.backend != "finite":
            raise UnsupportedBackendError("exact transition matrix needs a finite chain")
        return expm(t * self.generator_phi)


def tilt_motion(motion, branching, eig):
    if motion.is_finite:
        M = fk_matrix(motion, branching)
        phi = np.asarray(eig.phi, dtype=float)
        L = M * phi[np.newaxis, :] / phi[:, np.newaxis]
        np.fill_diagonal(L, 0.0)
        np.fill_diagonal(L, -L.sum(axis=1))
        chain = FiniteChainMotion(L, killing=np.zeros(motion.n_states), measure=motion.measure)
        stationary = phi * np.asarray(eig.phi_tilde) * motion.measure
        return TiltedMotion("finite", L, chain, stationary)
    tilted = TiltedDiffusion1D(motion.a, motion.b, motion.step_dt)

    def stationary_density(x):
        return eig.phi(x) * eig.phi_tilde(x)

    return TiltedMotion("diffusion", tilted.drift, tilted, stationary_density)


def iu_convergence_profile(motion, branching, eig, t_grid):
    """Sup deviation of the tilted transition kernel from stationarity per t.

    Returns (deviations, slope). Asserts strict decrease along the grid, and
    when at least two grid points sit above the numerical floor, checks the
    log-linear decay rate against the spectral gap within 5%.
    """
    if not motion.is_finite:
        raise UnsupportedBackendError("convergence profile needs a finite chain")
    tilt = tilt_motion(motion, branching, eig)
    pi = tilt.stationary
    ts = [float(t) for t in t_grid]
    devs = []
    for t in ts:
        T = tilt.transition(t)
        devs.append(float(np.max(np.abs(T / pi[np.newaxis, :] - 1.0))))
    for earlier, later in zip(devs, devs[1:]):
        if not later < earlier:
            raise SpectralError(f"deviation failed to decrease: {devs}")
    floor = 1e-13
    usable = [(t, d) for t, d in zip(ts, devs) if d > floor]
    slope = None
    if len(usable) >= 2:
        tu = np.array([t for t, _ in usable])
        du = np.log([d for _, d in usable])
        slope = float(np.polyfit(tu, du, 1)[0])
        if eig.gap and abs(slope + eig.gap) > 0.05 * eig.gap:
            raise SpectralError(
                f"decay slope {slope:.4g} is not -gap = {-eig.gap:.4g} within 5%"
            )
    return devs, slope


# --- L log L criterion -------------------------------------------------------


class CriterionResult:
    """Outcome of the L log L integral: Finite(value) or Diverges."""

    def __init__(self, finite, value=None, l_values=None, witness=None):
        self.finite = bool(finite)
        self.value = value
        self.l_values = l_values
        self.witness = witness

    def to_json(self):
        out = {"finite": self.finite}
        if self.finite:
            out["value"] = float(self.value)
        elif self.witness is not None:
            out["witness"] = self.witness
        return out

    def __repr__(self):
        return f"Finite({self.value:.6g})" if self.finite else "Diverges"


def llogl_criterion(branching, eig, measure_m):
    """Integral of phi_tilde * beta * l against m, where
    l(x) = sum_k k phi(x) log+(k phi(x)) p_k(x).

    Finite laws sum exactly. The heavy-tailed law's l is infinite whenever
    phi(x) > 0 (integral comparison), in which case the verdict is Diverges
    and the witness records where partial sums pass a reference bound.
    """
    m = np.asarray(measure_m, dtype=float)
    n = len(m)
    phi = np.asarray([eig.phi_at(i) for i in range(n)], dtype=float)
    l_values = []
    witness = None
    for i in range(n):
        law = branching.law_at(i)
        l_i = law.l_value(phi[i])
        l_values.append(l_i)
        if math.isinf(l_i) and witness is None:
            loglog_cutoff = law.cutoff_exceeding(1e3)
            witness = {
                "state": i,
                "bound": 1e3,
                "loglog_cutoff": loglog_cutoff,
            }
    if any(math.isinf(v) for v in l_values):
        return CriterionResult(False, l_values=l_values, witness=witness)
    beta = np.asarray(
        [branching.beta_at(i) for i in range(n)], dtype=float
    )
    phi_tilde = np.asarray([eig.phi_tilde_at(i) for i in range(n)], dtype=float)
    value = float(np.sum(phi_tilde * beta * np.asarray(l_values) * m))
    return CriterionResult(True, value=value, l_values=l_values)


# --- nonlinear log-Laplace ODE -----------------------------------------------


def u_equation_rhs(motion, branching, u):
    """Right side of du/ds = G_killed u + kappa + beta (psi(u) - u).

    The kappa source term is the factor 1 a motion-killed particle leaves
    behind in the Laplace functional (it vanishes with no offspring); without
    it, u = 1 would not be the fixed point of f = 0 on chains with killing.
    On conservative chains kappa = 0 and the term is inert.
    """
    psi = np.array(
        [branching.law_at(i).pgf(u[i]) for i in range(motion.n_states)]
    )
    beta = np.asarray([branching.beta_at(i) for i in range(motion.n_states)], dtype=float)
    return motion.generator @ u + motion.killing + beta * (psi - u)


def solve_u_equation(motion, branching, f, t, step=1e-3):
    """Integrate the offspring-nonlinear evolution from u_0 = exp(-f) to time t.

    Fixed-step RK4; the step is shrunk to divide t exactly so the grid always
    lands on the horizon. Componentwise 0 <= u <= 1 is enforced up to
    integration error and then clipped.
    """
    if not motion.is_finite:
        raise UnsupportedBackendError("the evolution ODE is solved on the finite backend")
    f = np.asarray(f, dtype=float)
    if (f < 0).any():
        raise ValueError("f must be nonnegative")
    u = np.exp(-f)
    if t == 0:
        return u
    n_steps = max(1, math.ceil(t / step))
    h = t / n_steps
    for _ in range(n_steps):
        k1 = u_equation_rhs(motion, branching, u)
        k2 = u_equation_rhs(motion, branching, u + 0.5 * h * k1)
        k3 = u_equation_rhs(motion, branching, u + 0.5 * h * k2)
        k4 = u_equation_rhs(motion, branching, u + h * k3)
        u = u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if u.min() < -1e-9 or u.max() > 1.0 + 1e-9:
        raise SpectralError(f"u left [0,1] beyond tolerance: [{u.min()}, {u.max()}]")
    return np.clip(u, 0.0, 1.0)
