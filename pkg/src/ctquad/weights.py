"""Correction weights for the singular trapezoidal rules.

The order-p rule for s_k(x - x0) * v(x) needs p_tilde weights w_i attached to
the stencil nodes around x0.  They are defined by moment-matching: for every
test function g_j(x) = g(|x|) * (x1/h)**a * (x2/h)**b (g a fixed radial bump),
the corrected rule must integrate s_k * g_j exactly.  That gives a small
linear system per grid offset (alpha, beta):

    sum_i w_i g(h|u_i|) u_i1**a u_i2**b
        = h**(-kappa) * (exact moment) - (punctured lattice sum),

with u_i = node_i - (alpha, beta), kappa = k + 1 + a + b.  The right-hand side
converges as h -> 0; the weights are its limit.

Two routes to the limit are provided and cross-checked against each other:

* `weights_limit` follows the tabulation procedure: solve at h = 2**-j for
  j = 2, 3, ... until successive weight vectors differ by less than a
  tolerance.  The lattice sums are carried in extended precision, but the
  right-hand side still cancels ~kappa*j binary digits, so for large kappa
  the sweep bottoms out above very tight tolerances (the sweep detects and
  reports that honestly).
* `weights_dual` evaluates the h -> 0 limit directly: the deficit between the
  integral and the punctured lattice sum of a homogeneous function has a
  convergent dual-lattice representation (a smoothly windowed sum over the
  lattice plus Fourier-image integrals).  No digits cancel, so it reaches
  ~1e-12 at any kappa, but it needs the singular point strictly off the
  lattice.  Everything in it is computed numerically from scratch.

Weight tables for interpolation are built per Fourier mode of phi on a closed
33x33 cell lattice and combined linearly at lookup time.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import mpmath as mp
import numpy as np

from .quad_core import (
    GridOffset,
    SingularTerm,
    Stencil,
    correction_monomials,
    stencil_for_order,
)

__all__ = [
    "BumpFunction",
    "DEFAULT_BUMP",
    "MomentCache",
    "WeightTable",
    "IllConditionedStencilError",
    "WeightConvergenceError",
    "TailTruncationWarning",
    "singular_moment",
    "weights_at_h",
    "weights_limit",
    "weights_dual",
    "moment_residual",
    "build_weight_table",
    "save_weight_table",
    "load_weight_table",
    "interpolate_weights",
    "default_cache_dir",
]

_LD = np.longdouble
_CLD = np.clongdouble
_PI_LD = _LD("3.14159265358979323846264338327950288")

TABLE_FORMAT_MAGIC = b"CTWT0001"
LIBRARY_VERSION = "0.1.0"


class IllConditionedStencilError(RuntimeError):
    """The moment-matching system is numerically singular at this offset."""


class WeightConvergenceError(RuntimeError):
    """The h-sweep did not reach the requested tolerance.

    Carries the best successive difference seen and the level it occurred at,
    so callers can decide whether the partially converged weights are usable.
    """

    def __init__(self, msg: str, best_j: int | None = None,
                 best_diff: float | None = None,
                 best_weights: np.ndarray | None = None):
        super().__init__(msg)
        self.best_j = best_j
        self.best_diff = best_diff
        self.best_weights = best_weights


class TailTruncationWarning(UserWarning):
    """phi has Fourier content beyond what a weight table resolves."""


# --------------------------------------------------------------------------
# the radial bump
# --------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class BumpFunction:
    """Radial cutoff g: identically 1 on [0, r0], identically 0 beyond R.

    The blend on (r0, R) is the smoothstep quotient
        g(r) = F(u) / (F(u) + F(1-u)),  F(t) = exp(-1/t),  u = (R-r)/(R-r0),
    which is C-infinity across both junctions (every derivative of F(1/t)
    vanishes at t -> 0+).  All derivatives of g vanish at r = 0 as well, so
    the moment-matching integrands stay smooth to all orders; the weight
    sweep converges at rates driven by the rule itself, not by the cutoff.
    """

    r0: float = 0.25
    R: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.r0 < self.R:
            raise ValueError(f"need 0 < r0 < R, got r0={self.r0}, R={self.R}")

    def __call__(self, r):
        r = np.asarray(r)
        out = np.zeros(r.shape, dtype=r.dtype if r.dtype.kind == "f" else float)
        out[r <= self.r0] = 1.0
        mid = (r > self.r0) & (r < self.R)
        if np.any(mid):
            u = (self.R - r[mid]) / (self.R - self.r0)
            fu = np.exp(-1.0 / u)
            fv = np.exp(-1.0 / (1.0 - u))
            out[mid] = fu / (fu + fv)
        return out

    def mp_eval(self, r):
        """Same function in mpmath arithmetic (for high-precision moments)."""
        r0 = mp.mpf(repr(self.r0))
        R = mp.mpf(repr(self.R))
        if r <= r0:
            return mp.mpf(1)
        if r >= R:
            return mp.mpf(0)
        u = (R - r) / (R - r0)
        fu = mp.e ** (-1 / u)
        fv = mp.e ** (-1 / (1 - u))
        return fu / (fu + fv)


DEFAULT_BUMP = BumpFunction()


# --------------------------------------------------------------------------
# exact moments of s_k * g * x^a y^b
# --------------------------------------------------------------------------

def _laurent_cos_sin(a: int, b: int) -> dict[int, tuple[Fraction, Fraction]]:
    """Exact Laurent coefficients of cos(t)**a * sin(t)**b in e**(i*l*t).

    Returns {l: (real, imag)} as Fractions.
    """
    coeffs: dict[int, tuple[Fraction, Fraction]] = {0: (Fraction(1), Fraction(0))}

    def mul(c, other):
        out: dict[int, tuple[Fraction, Fraction]] = {}
        for e1, (r1, i1) in c.items():
            for e2, (r2, i2) in other.items():
                e = e1 + e2
                r, i = r1 * r2 - i1 * i2, r1 * i2 + i1 * r2
                pr, pi = out.get(e, (Fraction(0), Fraction(0)))
                out[e] = (pr + r, pi + i)
        return out

    cosf = {1: (Fraction(1, 2), Fraction(0)), -1: (Fraction(1, 2), Fraction(0))}
    sinf = {1: (Fraction(0), Fraction(-1, 2)), -1: (Fraction(0), Fraction(1, 2))}
    for _ in range(a):
        coeffs = mul(coeffs, cosf)
    for _ in range(b):
        coeffs = mul(coeffs, sinf)
    return coeffs


def _mode_laurent(coeffs: Mapping[tuple[str, int], float], a: int, b: int
                  ) -> dict[int, complex]:
    """Laurent coefficients of phi(t) * cos(t)**a * sin(t)**b (floats)."""
    base = _laurent_cos_sin(a, b)
    out: dict[int, complex] = {}

    def add(l: int, val: complex):
        if val != 0:
            out[l] = out.get(l, 0.0) + val

    for (kind, m), c in coeffs.items():
        if c == 0.0:
            continue
        for l, (re, im) in base.items():
            z = complex(re, im)
            if kind == "c":
                if m == 0:
                    add(l, c * z)
                else:
                    add(l + m, 0.5 * c * z)
                    add(l - m, 0.5 * c * z)
            else:
                add(l + m, -0.5j * c * z)
                add(l - m, 0.5j * c * z)
    return out


class MomentCache:
    """Exact radial and angular moments for the moment-matching systems.

    Radial: rho_m = integral_0^inf r**m g(r) dr.  The plateau part is exact;
    the blend region is integrated with adaptive high-precision quadrature
    (40 significant digits), far below the 1e-13 relative target.

    Angular: integral_0^2pi trig(m t) cos(t)**a sin(t)**b dt, computed in
    exact rational arithmetic times pi.
    """

    def __init__(self, bump: BumpFunction = DEFAULT_BUMP, dps: int = 40):
        self.bump = bump
        self.dps = dps
        self._radial: dict[tuple[int, int], np.longdouble] = {}
        self._angular: dict[tuple[str, int, int, int], np.longdouble] = {}

    def radial_moment(self, m: int, dps: int | None = None) -> np.longdouble:
        dps = dps or self.dps
        key = (m, dps)
        if key not in self._radial:
            with mp.workdps(dps):
                r0 = mp.mpf(repr(self.bump.r0))
                R = mp.mpf(repr(self.bump.R))

                def f(r):
                    return r ** m * self.bump.mp_eval(r)

                val = r0 ** (m + 1) / (m + 1) + mp.quad(f, [r0, R])
                self._radial[key] = _LD(mp.nstr(val, 30))
        return self._radial[key]

    def angular_moment(self, mode: tuple[str, int], a: int, b: int) -> np.longdouble:
        kind, m = mode
        key = (kind, m, a, b)
        if key not in self._angular:
            co = _laurent_cos_sin(a, b)
            cm = co.get(m, (Fraction(0), Fraction(0)))
            cmm = co.get(-m, (Fraction(0), Fraction(0)))
            if kind == "c":
                val = cm[0] if m == 0 else cm[0] + cmm[0]
            else:
                val = cmm[1] - cm[1]
            scale = 2 * _PI_LD if (kind == "c" and m == 0) else _PI_LD
            self._angular[key] = (_LD(val.numerator) / _LD(val.denominator)) * scale
        return self._angular[key]


_DEFAULT_MOMENTS = MomentCache()


def _term_coefficients(term: SingularTerm, cutoff: float = 1e-14
                       ) -> dict[tuple[str, int], float]:
    """Fourier modes of phi as {("c"|"s", m): coefficient}, small ones dropped."""
    norm = max(float(np.max(np.abs(term.a))), float(np.max(np.abs(term.b))), 1e-300)
    out: dict[tuple[str, int], float] = {("c", 0): float(term.a[0])}
    for m in range(1, len(term.a)):
        if abs(term.a[m]) > cutoff * norm:
            out[("c", m)] = float(term.a[m])
        if abs(term.b[m]) > cutoff * norm:
            out[("s", m)] = float(term.b[m])
    return out


def singular_moment(term: SingularTerm, monomial: tuple[int, int],
                    bump: BumpFunction = DEFAULT_BUMP,
                    moments: MomentCache | None = None) -> float:
    """Exact integral of s_k(x) * g(|x|) * x^a y^b over the plane.

    Separates into (radial moment of order k+a+b) x (angular moment per
    Fourier mode of phi).
    """
    if moments is None:
        moments = _DEFAULT_MOMENTS if bump == DEFAULT_BUMP else MomentCache(bump)
    a, b = monomial
    coeffs = _term_coefficients(term)
    rad = moments.radial_moment(term.k + a + b)
    tot = _LD(0)
    for mode, c in coeffs.items():
        tot += _LD(c) * rad * moments.angular_moment(mode, a, b)
    return float(tot)


# --------------------------------------------------------------------------
# windowed lattice sums (extended precision)
# --------------------------------------------------------------------------

def _lattice_mode_sums(k: int, alpha: float, beta: float, h: float,
                       modes: Sequence[tuple[str, int]],
                       monos: Sequence[tuple[int, int]],
                       stencil_offsets: Sequence[tuple[int, int]],
                       bump: BumpFunction) -> np.ndarray:
    """Punctured sums sum_n g(h|u|) |u|**(k-1) e**(i m psi) u1**a u2**b.

    u = n - (alpha, beta) runs over the integer lattice minus the stencil
    nodes; the window g makes the sum finite.  Returns complex entries of
    shape (len(modes), len(monos)); the cos mode is the real part, the sin
    mode the imaginary part.

    Summation is deterministic: fixed tiling over rows, pairwise np.sum per
    tile, Kahan compensation across tiles, all in extended precision.
    """
    K = int(np.ceil(bump.R / h)) + 3
    n1 = np.arange(-K, K + 1, dtype=np.int64)
    ncols = n1.size
    res = np.zeros((len(modes), len(monos)), dtype=_CLD)
    comp = np.zeros_like(res)
    tile = max(16, int(2.0e6 / ncols))
    mmax = max((m for _, m in modes), default=0)
    mode_rows = {}
    for mi, (_, m) in enumerate(modes):
        mode_rows.setdefault(m, []).append(mi)
    amax = max(a for a, _ in monos)
    bmax = max(b for _, b in monos)
    for i0 in range(0, ncols, tile):
        nn1 = n1[i0:i0 + tile]
        u1 = (nn1[:, None].astype(_LD) - _LD(alpha)) + np.zeros((1, ncols), dtype=_LD)
        u2 = np.zeros((nn1.size, 1), dtype=_LD) + (n1[None, :].astype(_LD) - _LD(beta))
        rr = np.hypot(u1, u2)
        g = bump((h * rr).astype(_LD))
        live = g > 0
        if not live.any():
            continue
        u1l, u2l, rl, gl = u1[live], u2[live], rr[live], g[live]
        ii = (nn1[:, None] + np.zeros((1, ncols), np.int64))[live]
        jj = (np.zeros((nn1.size, 1), np.int64) + n1[None, :])[live]
        mask = np.ones(rl.shape, bool)
        for (sa, sb) in stencil_offsets:
            mask &= ~((ii == sa) & (jj == sb))
        rl_safe = np.where(mask, rl, _LD(1))
        base = np.where(mask, gl * rl_safe ** _LD(k - 1), _LD(0))
        # powers of the monomial factors
        u1p = [np.ones_like(u1l)]
        for _ in range(amax):
            u1p.append(u1p[-1] * u1l)
        u2p = [np.ones_like(u2l)]
        for _ in range(bmax):
            u2p.append(u2p[-1] * u2l)
        monov = [base * u1p[a] * u2p[b] for (a, b) in monos]
        zz = np.where(mask, (u1l + 1j * u2l) / rl_safe, _CLD(0))
        zm = np.ones_like(zz)
        psi = None
        for m in range(0, mmax + 1):
            if m > 0:
                if m % 8 == 0:
                    # refresh the power chain to stop rounding drift
                    if psi is None:
                        psi = np.arctan2(u2l, u1l)
                    zm = np.where(mask, np.cos(m * psi) + 1j * np.sin(m * psi), _CLD(0))
                else:
                    zm = zm * zz
            if m not in mode_rows:
                continue
            for jj_m in range(len(monos)):
                v = np.sum(monov[jj_m] * zm)
                for mi in mode_rows[m]:
                    y = v - comp[mi, jj_m]
                    t = res[mi, jj_m] + y
                    comp[mi, jj_m] = (t - res[mi, jj_m]) - y
                    res[mi, jj_m] = t
    return res


# --------------------------------------------------------------------------
# finite-h weights and the h-sweep
# --------------------------------------------------------------------------

def _system_matrix(offsets: Sequence[tuple[int, int]],
                   monos: Sequence[tuple[int, int]],
                   alpha: float, beta: float, h: float | None,
                   bump: BumpFunction) -> np.ndarray:
    """Matrix G[j, i] = g(h|u_i|) u_i1**a_j u_i2**b_j (g == 1 in the limit)."""
    G = np.zeros((len(monos), len(offsets)))
    for i, (sa, sb) in enumerate(offsets):
        u1, u2 = sa - alpha, sb - beta
        gfac = 1.0 if h is None else float(bump(np.asarray(h * math.hypot(u1, u2))))
        for j, (a, b) in enumerate(monos):
            G[j, i] = gfac * u1 ** a * u2 ** b
    return G


def _solve_checked(G: np.ndarray, rhs: np.ndarray, alpha: float, beta: float,
                   stencil: Stencil) -> np.ndarray:
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > 1e12:
        raise IllConditionedStencilError(
            f"moment-matching system is ill-conditioned (cond={cond:.2e}) at "
            f"(alpha, beta)=({alpha}, {beta}) for stencil {stencil.offsets}")
    return np.linalg.solve(G, rhs)


def _coeffs_rhs(k: int, coeffs: Mapping[tuple[str, int], float],
                alpha: float, beta: float, h: float,
                monos: Sequence[tuple[int, int]],
                stencil_offsets: Sequence[tuple[int, int]],
                bump: BumpFunction, moments: MomentCache) -> np.ndarray:
    """Right-hand sides h**(-kappa) * moment - lattice sum, one per monomial."""
    modes = sorted(coeffs.keys(), key=lambda t: (t[1], t[0]))
    S = _lattice_mode_sums(k, alpha, beta, h, modes, monos, stencil_offsets, bump)
    hl = _LD(h)
    rhs = np.zeros(len(monos), dtype=_LD)
    for j, (a, b) in enumerate(monos):
        tot = _LD(0)
        for mi, mode in enumerate(modes):
            c = _LD(coeffs[mode])
            mom = moments.radial_moment(k + a + b) * moments.angular_moment(mode, a, b)
            lat = S[mi, j].real if mode[0] == "c" else S[mi, j].imag
            tot += c * (hl ** _LD(-(k + 1 + a + b)) * mom - lat)
        rhs[j] = tot
    return rhs.astype(float)


def weights_at_h(term: SingularTerm, offset: GridOffset, stencil: Stencil,
                 h: float, bump: BumpFunction = DEFAULT_BUMP,
                 moments: MomentCache | None = None) -> np.ndarray:
    """Solve the moment-matching system at one grid spacing h.

    Raises IllConditionedStencilError if the test matrix has condition number
    above 1e12 at this offset.
    """
    if moments is None:
        moments = _DEFAULT_MOMENTS if bump == DEFAULT_BUMP else MomentCache(bump)
    monos = correction_monomials(stencil.p)
    coeffs = _term_coefficients(term)
    rhs = _coeffs_rhs(term.k, coeffs, offset.alpha, offset.beta, h,
                      monos, stencil.offsets, bump, moments)
    G = _system_matrix(stencil.offsets, monos, offset.alpha, offset.beta, h, bump)
    return _solve_checked(G, rhs, offset.alpha, offset.beta, stencil)


def default_tolerance(p: int) -> float:
    """Sweep tolerance: 1e-8 up to order 3, 1e-4 for the order-4 rule."""
    return 1e-4 if p >= 4 else 1e-8


# Stall handling.  A sweep's successive differences trace a V once extended
# precision runs out: superalgebraic decay down to a cancellation floor,
# then growth by roughly 2**kappa per halving level.  Two thresholds keep
# the two failure modes apart: a bottom counts as that floor (and not as the
# wobble of an angular mode the coarse levels cannot resolve yet) only when
# it sits far below the peak difference of the descent, and a floored best
# iterate is accepted into tables only when the bottom came within a fixed
# multiple of the requested tolerance.  Measured floors for the tightest
# systems (k=2 with degree-2 monomials, kappa=5) populate 1e-8..2.2e-7 at
# tol=1e-8, i.e. <= 1e-6 of their O(1) peaks, while pre-asymptotic wobble
# bottoms out near 0.2 of the peak -- the regimes are four decades apart.
STALL_RECOGNITION_RATIO = 1e-4
STALL_ACCEPT_FACTOR = 32.0


def _stall_recognized(diff: float, best: float, peak: float, rising: int,
                      tol: float) -> bool:
    """True when a rising difference sequence is a converged noise bottom.

    Evidence required: the rise is decisive (>= 4x the bottom; cancellation
    noise grows ~2**kappa >= 8 per level) or persistent (two levels without
    improvement), and the bottom sits below the recognition ratio of the
    descent's peak or already within the table acceptance bound.
    """
    if diff < 4.0 * best and rising < 2:
        return False
    return (best <= STALL_RECOGNITION_RATIO * peak
            or best <= STALL_ACCEPT_FACTOR * tol)


def weights_limit(term: SingularTerm, offset: GridOffset, stencil: Stencil,
                  tol: float | None = None, j_start: int = 2, j_cap: int = 14,
                  on_stall: str = "raise",
                  bump: BumpFunction = DEFAULT_BUMP,
                  moments: MomentCache | None = None) -> tuple[np.ndarray, float]:
    """h -> 0 limit of the correction weights by the halving sweep.

    Solves at h = 2**-j for j = j_start, j_start+1, ... and accepts once the
    max-norm difference between successive weight vectors drops to tol; the
    returned weights are the coarser member of the accepted pair and h_star
    its spacing.

    The right-hand side of the system cancels about kappa*j binary digits at
    level j, so for kappa = k+1+a+b large the achievable difference bottoms
    out before tight tolerances are reached.  When the differences turn
    upward on noise-floor evidence (see _stall_recognized), the sweep has
    hit that floor: on_stall="raise" (default) raises WeightConvergenceError
    carrying the best iterate; on_stall="best" returns the best iterate with
    a warning.  Upturns without that evidence are the pre-asymptotic wobble
    of barely-resolved angular modes and the sweep continues through them.
    Exhausting j_cap also raises, reporting the last difference.
    """
    if tol is None:
        tol = default_tolerance(stencil.p)
    if on_stall not in ("raise", "best"):
        raise ValueError(f"on_stall must be 'raise' or 'best', got {on_stall!r}")
    prev: np.ndarray | None = None
    best_diff, best_j, best_w = math.inf, -1, None
    peak_diff = 0.0
    rising = 0
    last_diff = math.nan
    for j in range(j_start, j_cap + 1):
        w = weights_at_h(term, offset, stencil, 2.0 ** -j, bump, moments)
        if prev is not None:
            diff = float(np.max(np.abs(w - prev)))
            peak_diff = max(peak_diff, diff)
            if diff <= tol:
                return prev, 2.0 ** -(j - 1)
            if diff < best_diff:
                best_diff, best_j, best_w = diff, j - 1, prev
                rising = 0
            else:
                rising += 1
                if _stall_recognized(diff, best_diff, peak_diff, rising, tol):
                    msg = (f"weight sweep stalled at |dw|={best_diff:.3e} "
                           f"(tol={tol:.1e}) for k={term.k}, p={stencil.p}, "
                           f"(alpha,beta)=({offset.alpha}, {offset.beta}); "
                           f"differences are rising again, which is the "
                           f"cancellation floor of the finite-h systems")
                    if on_stall == "best":
                        warnings.warn(msg + "; returning the best iterate")
                        return best_w, 2.0 ** -best_j
                    raise WeightConvergenceError(msg, best_j, best_diff, best_w)
            last_diff = diff
        prev = w
    raise WeightConvergenceError(
        f"weight sweep did not converge by j={j_cap} "
        f"(last |dw|={last_diff:.3e}, tol={tol:.1e}) for k={term.k}, "
        f"p={stencil.p}, (alpha,beta)=({offset.alpha}, {offset.beta})",
        best_j, best_diff, best_w)


def moment_residual(term: SingularTerm, offset: GridOffset, stencil: Stencil,
                    weights: np.ndarray, h: float,
                    bump: BumpFunction = DEFAULT_BUMP,
                    moments: MomentCache | None = None) -> np.ndarray:
    """Residuals of the moment-matching equations at spacing h.

    Returns sum_i w_i g_j(u_i) - (scaled moment - lattice sum) per monomial;
    small residuals certify the weights against the defining integrals.
    """
    if moments is None:
        moments = _DEFAULT_MOMENTS if bump == DEFAULT_BUMP else MomentCache(bump)
    monos = correction_monomials(stencil.p)
    coeffs = _term_coefficients(term)
    rhs = _coeffs_rhs(term.k, coeffs, offset.alpha, offset.beta, h,
                      monos, stencil.offsets, bump, moments)
    G = _system_matrix(stencil.offsets, monos, offset.alpha, offset.beta, h, bump)
    return G @ np.asarray(weights, dtype=float) - rhs


# --------------------------------------------------------------------------
# the dual-lattice limit (exact h -> 0 constants)
# --------------------------------------------------------------------------

def _dual_coefficient(kappa: int, ell: int) -> complex:
    """Fourier transform constant of |u|**(kappa-2) e**(i ell psi).

    c(kappa, ell) = (-i)**|ell| pi**(1-kappa) Gamma((|ell|+kappa)/2)
                    / Gamma(1 + (|ell|-kappa)/2).

    Exactly zero when the Gamma in the denominator sits at a pole, i.e. when
    |ell| <= kappa-2 with ell and kappa of equal parity -- those angular
    pieces are plain polynomials and have no lattice deficit.
    """
    al = abs(ell)
    zden = 1.0 + (al - kappa) / 2.0
    if zden <= 0.0 and zden == int(zden):
        return 0.0 + 0.0j
    val = math.pi ** (1 - kappa) * math.gamma((al + kappa) / 2.0) / math.gamma(zden)
    return (-1j) ** al * val


def _eta_blend(t: np.ndarray) -> np.ndarray:
    """C-infinity ramp 0 -> 1 on [0, 1] (same quotient as the radial bump)."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    out[t >= 1.0] = 1.0
    mid = (t > 0.0) & (t < 1.0)
    if np.any(mid):
        fu = np.exp(-1.0 / t[mid])
        fv = np.exp(-1.0 / (1.0 - t[mid]))
        out[mid] = fu / (fu + fv)
    return out


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)
_LAG_NODES, _LAG_WEIGHTS = np.polynomial.laguerre.laggauss(64)


def _w_tail_integral(kappa: int, ell: int, beta: float, P: float) -> float:
    """W = integral_P^inf rho**(1-kappa) eta((rho-P)/P) J_ell(beta*rho) drho.

    Split at 2P where eta saturates: Gauss-Legendre panels against scipy's
    Bessel J on [P, 2P], then the pure power tail via rotation of the Hankel
    functions into the complex plane, where the integrand decays like
    exp(-beta*t) and Gauss-Laguerre applies:

        integral_2P^inf rho**(1-kappa) J_ell(beta rho) drho
            = Re[ i * e**(2i P beta)/beta
                  * int_0^inf (2P + i tau/beta)**(1-kappa)
                    H1e_ell(2P beta + i tau) e**(-tau) dtau ],

    with H1e the exponentially scaled first Hankel function.
    """
    from scipy import special

    # oscillatory but smooth part against the ramp
    width = min(math.pi / max(beta, 1e-8), P / 4.0)
    nseg = max(4, int(math.ceil(P / width)))
    edges = np.linspace(P, 2.0 * P, nseg + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1:] - edges[:-1])
    rho = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
    wq = (half[:, None] * _GL_WEIGHTS[None, :]).ravel()
    vals = rho ** (1.0 - kappa) * _eta_blend((rho - P) / P) * special.jv(ell, beta * rho)
    part1 = float(np.dot(wq, vals))

    # pure power tail by Hankel rotation
    z = 2.0 * P * beta + 1j * _LAG_NODES
    f = (2.0 * P + 1j * _LAG_NODES / beta) ** (1.0 - kappa) * special.hankel1e(ell, z)
    t1 = 1j * np.exp(2j * P * beta) / beta * np.dot(_LAG_WEIGHTS, f)
    return part1 + float(t1.real)


def _dual_lattice_sums(kappa_ells: Iterable[tuple[int, int]],
                       w: tuple[float, float], P: float = 40.0,
                       image_cut: float = 1.6) -> dict[tuple[int, int], complex]:
    """Z(kappa, ell; w) = sum over nonzero lattice nu of
    rho**(-kappa) e**(i ell theta) e**(-2 pi i nu . w),

    via a smooth split: the part with window 1 - eta summed directly, the
    rest converted to Fourier images of w, which decay super-algebraically
    in P * |w + n| (verified by varying P).
    """
    pairs = sorted(set(kappa_ells))
    # direct part, shared geometry
    K = int(math.ceil(2.0 * P)) + 1
    n = np.arange(-K, K + 1)
    N1, N2 = np.meshgrid(n, n, indexing="ij")
    rho = np.hypot(N1, N2).ravel()
    keep = (rho > 0) & (rho < 2.0 * P)
    N1, N2, rho = N1.ravel()[keep], N2.ravel()[keep], rho[keep]
    theta = np.arctan2(N2, N1)
    window = 1.0 - _eta_blend(rho / P - 1.0)
    phase_w = np.exp(-2j * math.pi * (N1 * w[0] + N2 * w[1]))
    base = window * phase_w
    out: dict[tuple[int, int], complex] = {}
    ell_phase: dict[int, np.ndarray] = {}
    for kappa, ell in pairs:
        if ell not in ell_phase:
            ell_phase[ell] = np.exp(1j * ell * theta)
        direct = complex(np.sum(rho ** float(-kappa) * ell_phase[ell] * base))
        out[(kappa, ell)] = direct
    # image part
    cx, cy = -round(w[0]), -round(w[1])
    for nx in range(cx - 2, cx + 3):
        for ny in range(cy - 2, cy + 3):
            rx, ry = w[0] + nx, w[1] + ny
            dist = math.hypot(rx, ry)
            if dist == 0.0 or dist > image_cut:
                continue
            beta = 2.0 * math.pi * dist
            arg = math.atan2(ry, rx)
            for kappa, ell in pairs:
                wint = _w_tail_integral(kappa, ell, beta, P)
                out[(kappa, ell)] += (2.0 * math.pi * (-1j) ** ell
                                      * np.exp(1j * ell * arg) * wint)
    return out


def weights_dual(term: SingularTerm, offset: GridOffset, stencil: Stencil,
                 P: float = 40.0) -> np.ndarray:
    """Correction weights directly in the h -> 0 limit.

    In the limit the bump drops out of the system matrix and the right-hand
    side becomes the lattice deficit of the homogeneous function
    f(u) = |u|**(k-1) phi(psi) u1**a u2**b, which equals the stencil values
    of f minus a dual-lattice sum weighted by the Fourier transform constants
    of each angular harmonic.  Nothing cancels, so this reaches ~1e-12 even
    where the finite-h sweep floors (kappa >= 5).

    Needs the singular point strictly off the lattice (the tabulation sweep
    covers lattice points, where the systems are benign anyway).
    """
    alpha, beta = offset.alpha, offset.beta
    monos = correction_monomials(stencil.p)
    coeffs = _term_coefficients(term)
    U = np.array([(sa - alpha, sb - beta) for (sa, sb) in stencil.offsets])
    if float(np.min(np.hypot(U[:, 0], U[:, 1]))) < 1e-9:
        raise ValueError("dual-lattice weights need (alpha, beta) strictly off "
                         "the lattice; use weights_limit there")
    # gather every (kappa, ell) needed across the monomials
    lau: dict[tuple[int, int], dict[int, complex]] = {}
    pairs: set[tuple[int, int]] = set()
    for (a, b) in monos:
        kappa = term.k + 1 + a + b
        y = _mode_laurent(coeffs, a, b)
        lau[(a, b)] = y
        for ell in y:
            if _dual_coefficient(kappa, ell) != 0:
                pairs.add((kappa, ell))
    zsums = _dual_lattice_sums(pairs, (alpha, beta), P=P)
    rhs = np.zeros(len(monos))
    rr = np.hypot(U[:, 0], U[:, 1])
    psi = np.arctan2(U[:, 1], U[:, 0])
    for j, (a, b) in enumerate(monos):
        kappa = term.k + 1 + a + b
        # stencil part of the deficit
        fvals = (rr ** (term.k - 1) * term.phi(psi)
                 * U[:, 0] ** a * U[:, 1] ** b)
        total = complex(np.sum(fvals))
        # dual part
        for ell, y in lau[(a, b)].items():
            c = _dual_coefficient(kappa, ell)
            if c != 0:
                total -= y * c * zsums[(kappa, ell)]
        if abs(total.imag) > 1e-9 * max(1.0, abs(total.real)):
            raise RuntimeError(f"dual-lattice deficit has a non-real part "
                               f"({total.imag:.2e}) for monomial {(a, b)}; "
                               f"harmonic bookkeeping is inconsistent")
        rhs[j] = total.real
    G = _system_matrix(stencil.offsets, monos, alpha, beta, None, DEFAULT_BUMP)
    return _solve_checked(G, rhs, alpha, beta, stencil)


# --------------------------------------------------------------------------
# weight tables
# --------------------------------------------------------------------------

@dataclasses.dataclass
class WeightTable:
    """Per-mode correction weights on a closed (grid_n x grid_n) offset lattice.

    data[row, m, n, i] is the weight of stencil node i for the phi mode of
    row `row` at offset (domain_lo + m*step, domain_lo + n*step): row 0 is
    the constant mode, rows 2j-1 and 2j are cos(j psi) and sin(j psi).
    m_levels holds the sweep level each entry was accepted at (h* = 2**-M).
    """

    k: int
    p: int
    tol: float
    n_modes: int
    grid_n: int
    domain_lo: float
    stencil_offsets: tuple[tuple[int, int], ...]
    bump_r0: float
    bump_R: float
    data: np.ndarray
    m_levels: np.ndarray
    version: str = LIBRARY_VERSION

    @property
    def step(self) -> float:
        return 1.0 / (self.grid_n - 1)

    @property
    def n_rows(self) -> int:
        return 2 * self.n_modes + 1

    def metadata(self) -> dict:
        return {
            "format": TABLE_FORMAT_MAGIC.decode(),
            "version": self.version,
            "k": self.k,
            "p": self.p,
            "tol": self.tol,
            "n_modes": self.n_modes,
            "grid_n": self.grid_n,
            "domain_lo": self.domain_lo,
            "stencil_offsets": [list(o) for o in self.stencil_offsets],
            "bump_r0": self.bump_r0,
            "bump_R": self.bump_R,
            "dtype": "<f8",
            "shape": list(self.data.shape),
        }


def _row_mode(row: int) -> tuple[str, int]:
    if row == 0:
        return ("c", 0)
    m = (row + 1) // 2
    return ("c", m) if row % 2 == 1 else ("s", m)


def _table_point(args) -> tuple[int, int, np.ndarray, np.ndarray]:
    """Worker: all per-mode weights at one lattice offset (joint sweep).

    Shares the windowed lattice sums across every still-unconverged mode at
    each level, and drops modes as they converge.

    The finite-h differences cancel ~kappa binary digits per level, so for
    kappa >= 5 the successive differences trace a V: they decay to a noise
    floor near tol and then grow.  Once a row's differences turn upward on
    noise-floor evidence (see _stall_recognized), the sweep stops for that
    row and the best iterate is accepted if the pair difference came within
    STALL_ACCEPT_FACTOR*tol — its level is recorded in m_levels as usual —
    otherwise the floor is above the certifiable accuracy and the sweep
    fails.  Measured floors for the tightest tables reach ~22*tol at the
    worst offsets; the bound still sits two orders below the offset
    interpolation error that dominates every table-mediated evaluation, and
    the pair difference overstates the stored entry's deviation from the
    h -> 0 limit anyway: at the V's bottom the amplified cancellation noise
    lives almost entirely in the finer member of the pair, while the
    coarser member that gets stored is converged to ~tol itself.
    """
    (k, p, mi, ni, alpha, beta, tol, n_modes, j_start, j_cap, r0, R) = args
    bump = BumpFunction(r0, R)
    moments = MomentCache(bump)
    stencil = stencil_for_order(p)
    monos = correction_monomials(p)
    G = _system_matrix(stencil.offsets, monos, alpha, beta, None, bump)
    n_rows = 2 * n_modes + 1
    modes = [_row_mode(r) for r in range(n_rows)]
    weights = np.zeros((n_rows, len(stencil.offsets)))
    m_levels = np.zeros(n_rows, dtype=np.int8)
    active = list(range(n_rows))
    prev: dict[int, np.ndarray] = {}
    best: dict[int, tuple[float, np.ndarray, int]] = {}
    peak: dict[int, float] = {}
    rising: dict[int, int] = {}

    def _settle(r: int) -> None:
        bd, bw, bl = best[r]
        if bd <= STALL_ACCEPT_FACTOR * tol:
            weights[r] = bw
            m_levels[r] = bl
            return
        raise WeightConvergenceError(
            f"table sweep noise floor |dw|={bd:.3e} exceeds "
            f"{STALL_ACCEPT_FACTOR:.0f}*tol={STALL_ACCEPT_FACTOR * tol:.1e} "
            f"at (alpha, beta)=({alpha}, {beta}), mode row {r}",
            bl, bd, bw)

    for j in range(j_start, j_cap + 1):
        h = 2.0 ** -j
        S = _lattice_mode_sums(k, alpha, beta, h,
                               [modes[r] for r in active], monos,
                               stencil.offsets, bump)
        Gh = _system_matrix(stencil.offsets, monos, alpha, beta, h, bump)
        cond = np.linalg.cond(Gh)
        if not np.isfinite(cond) or cond > 1e12:
            raise IllConditionedStencilError(
                f"ill-conditioned system (cond={cond:.2e}) at "
                f"(alpha, beta)=({alpha}, {beta}) for stencil {stencil.offsets}")
        hl = _LD(h)
        still = []
        for row_i, r in enumerate(active):
            kind = modes[r][0]
            rhs = np.zeros(len(monos))
            for jj, (a, b) in enumerate(monos):
                kappa = k + 1 + a + b
                mom = (moments.radial_moment(k + a + b)
                       * moments.angular_moment(modes[r], a, b))
                lat = S[row_i, jj].real if kind == "c" else S[row_i, jj].imag
                rhs[jj] = float(hl ** _LD(-kappa) * mom - lat)
            wnew = np.linalg.solve(Gh, rhs)
            if r in prev:
                diff = float(np.max(np.abs(wnew - prev[r])))
                peak[r] = max(peak.get(r, 0.0), diff)
                if diff <= tol:
                    weights[r] = prev[r]
                    m_levels[r] = j - 1
                    continue
                if r not in best or diff < best[r][0]:
                    best[r] = (diff, prev[r], j - 1)
                    rising[r] = 0
                else:
                    rising[r] = rising.get(r, 0) + 1
                    if _stall_recognized(diff, best[r][0], peak[r],
                                         rising[r], tol):
                        _settle(r)
                        continue
            prev[r] = wnew
            still.append(r)
        active = still
        if not active:
            return (mi, ni, weights, m_levels)
    hopeless = [r for r in active
                if r not in best or best[r][0] > STALL_ACCEPT_FACTOR * tol]
    if hopeless:
        raise WeightConvergenceError(
            f"table sweep did not converge by j={j_cap} at "
            f"(alpha, beta)=({alpha}, {beta}); unconverged mode rows: "
            f"{hopeless}")
    for r in active:
        _settle(r)
    return (mi, ni, weights, m_levels)


def default_cache_dir() -> str:
    env = os.environ.get("CTQUAD_CACHE_DIR")
    if env:
        return env
    return os.path.join(os.path.expanduser("~"), ".cache", "ctquad")


def build_weight_table(k: int, p: int, tol: float | None = None,
                       n_modes: int = 16, grid_n: int = 33,
                       processes: int | None = None,
                       cache_dir: str | None = None,
                       force: bool = False,
                       bump: BumpFunction = DEFAULT_BUMP,
                       j_cap: int = 14) -> WeightTable:
    """Build (or load from cache) the per-mode weight table for (k, p).

    The offsets run over the closed unit cell, 33x33 by default; for p = 1
    the cell is [-1/2, 1/2]^2 (nearest-node convention), otherwise [0, 1]^2.
    Each lattice point is an independent job (no shared mutable state), so
    the build parallelizes over points; results are assembled in fixed order
    and the output is deterministic regardless of scheduling.
    """
    if tol is None:
        tol = default_tolerance(p)
    cache_dir = cache_dir or default_cache_dir()
    name = f"ctwt_k{k}_p{p}_N{n_modes}_g{grid_n}_tol{tol:.1e}.ctwt"
    path = os.path.join(cache_dir, name)
    if not force and os.path.exists(path):
        return load_weight_table(path)
    domain_lo = -0.5 if p == 1 else 0.0
    step = 1.0 / (grid_n - 1)
    jobs = []
    for mi in range(grid_n):
        for ni in range(grid_n):
            alpha = domain_lo + mi * step
            beta = domain_lo + ni * step
            jobs.append((k, p, mi, ni, alpha, beta, tol, n_modes, 2, j_cap,
                         bump.r0, bump.R))
    n_rows = 2 * n_modes + 1
    stencil = stencil_for_order(p)
    data = np.zeros((n_rows, grid_n, grid_n, len(stencil.offsets)))
    m_levels = np.zeros((n_rows, grid_n, grid_n), dtype=np.int8)
    nproc = processes or min(os.cpu_count() or 1, 16)
    if nproc > 1:
        with ProcessPoolExecutor(max_workers=nproc) as ex:
            for mi, ni, w, lev in ex.map(_table_point, jobs, chunksize=4):
                data[:, mi, ni, :] = w
                m_levels[:, mi, ni] = lev
    else:
        for job in jobs:
            mi, ni, w, lev = _table_point(job)
            data[:, mi, ni, :] = w
            m_levels[:, mi, ni] = lev
    table = WeightTable(k=k, p=p, tol=tol, n_modes=n_modes, grid_n=grid_n,
                        domain_lo=domain_lo, stencil_offsets=stencil.offsets,
                        bump_r0=bump.r0, bump_R=bump.R,
                        data=data, m_levels=m_levels)
    os.makedirs(cache_dir, exist_ok=True)
    save_weight_table(table, path)
    return table


def save_weight_table(table: WeightTable, path: str) -> None:
    """Write the binary table plus a JSON metadata sidecar.

    Layout: 8-byte magic, uint32 little-endian header length, UTF-8 JSON
    header, then the weight block and the level block as raw little-endian
    arrays in C order.
    """
    meta = table.metadata()
    header = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(TABLE_FORMAT_MAGIC)
        f.write(np.uint32(len(header)).tobytes())
        f.write(header)
        f.write(np.ascontiguousarray(table.data, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(table.m_levels, dtype="<i1").tobytes())
    with open(path + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_weight_table(path: str) -> WeightTable:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != TABLE_FORMAT_MAGIC:
            raise ValueError(f"{path}: not a weight table (bad magic {magic!r}); "
                             f"this build reads format {TABLE_FORMAT_MAGIC.decode()} "
                             f"-- rebuild the table with the current version")
        hlen = int(np.frombuffer(f.read(4), dtype=np.uint32)[0])
        meta = json.loads(f.read(hlen).decode())
        shape = tuple(meta["shape"])
        count = int(np.prod(shape))
        data = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).copy()
        m_levels = np.frombuffer(f.read(count // shape[-1]), dtype="<i1").reshape(shape[:-1]).copy()
    return WeightTable(
        k=meta["k"], p=meta["p"], tol=meta["tol"], n_modes=meta["n_modes"],
        grid_n=meta["grid_n"], domain_lo=meta["domain_lo"],
        stencil_offsets=tuple(tuple(o) for o in meta["stencil_offsets"]),
        bump_r0=meta["bump_r0"], bump_R=meta["bump_R"],
        data=data, m_levels=m_levels, version=meta["version"])


def interpolate_weights(table: WeightTable, term: SingularTerm,
                        offset: GridOffset) -> np.ndarray:
    """Weights for an arbitrary phi and off-lattice (alpha, beta).

    Combines the tabulated per-mode weights linearly with phi's Fourier
    coefficients, then interpolates over the offset cell with tensor cubic
    Lagrange polynomials on the surrounding 4x4 lattice patch.  At lattice
    points the interpolation reproduces table entries exactly.

    Emits TailTruncationWarning if phi has Fourier content beyond the
    table's mode range (more than 1e-10 of its norm).
    """
    if term.k != table.k:
        raise ValueError(f"table is for k={table.k}, term has k={term.k}")
    coeffs = _term_coefficients(term, cutoff=1e-12)
    norm = max(float(np.max(np.abs(term.a))), float(np.max(np.abs(term.b))), 1e-300)
    tail = sum(float(np.abs(term.a[m]) + np.abs(term.b[m]))
               for m in range(table.n_modes + 1, len(term.a)))
    if tail > 1e-10 * norm:
        warnings.warn(
            f"phi has Fourier mass {tail:.2e} beyond mode {table.n_modes}; "
            f"the interpolated weights ignore it", TailTruncationWarning)
    grid_n, step, lo = table.grid_n, table.step, table.domain_lo
    hi = lo + 1.0
    a_off, b_off = offset.alpha, offset.beta
    eps = 1e-12
    if not (lo - eps <= a_off <= hi + eps and lo - eps <= b_off <= hi + eps):
        raise ValueError(f"offset ({a_off}, {b_off}) outside the table cell "
                         f"[{lo}, {hi}]^2")

    def window(t: float) -> tuple[int, np.ndarray]:
        x = (t - lo) / step
        i0 = int(math.floor(x)) - 1
        i0 = min(max(i0, 0), grid_n - 4)
        xi = x - i0
        nodes = np.arange(4.0)
        basis = np.ones(4)
        for jn in range(4):
            for kn in range(4):
                if kn != jn:
                    basis[jn] *= (xi - nodes[kn]) / (nodes[jn] - nodes[kn])
        return i0, basis

    ia, ba = window(a_off)
    ib, bb = window(b_off)
    patch = np.zeros((4, 4, table.data.shape[-1]))
    for mode, c in coeffs.items():
        kind, m = mode
        if m > table.n_modes:
            continue
        row = 0 if m == 0 else (2 * m - 1 if kind == "c" else 2 * m)
        patch += c * table.data[row, ia:ia + 4, ib:ib + 4, :]
    return np.einsum("a,b,abi->i", ba, bb, patch)
