"""Trapezoidal rules on uniform 2D grids, with corrections for point singularities.

Everything here integrates functions of the form s(x - x0) * v(x), where v is
smooth and s blows up (or merely loses smoothness) at a single point x0.  The
plain trapezoidal rule drops to low order on such integrands.  The corrected
rules repair the accuracy order by order: they puncture the sum at a few nodes
near x0 and add back weighted values of v at those nodes, with weights supplied
by the `weights` module.

Conventions used throughout:

* a grid node is ``origin + h * (i, j)`` for integer indices ``(i, j)``;
* the singular factor of homogeneity k is ``s_k(x) = |x|**(k-1) * phi(theta)``
  with phi a smooth 2*pi-periodic function;
* the offset of x0 inside the grid is ``(alpha, beta) = (x0 - anchor)/h`` where
  the anchor is the nearest node (single-node corrections) or the lower-left
  cell corner (larger stencils).
"""
from __future__ import annotations

import dataclasses
import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Grid2",
    "SingularTerm",
    "SingularFunction",
    "GridOffset",
    "Stencil",
    "PTILDE",
    "STENCIL_OFFSETS",
    "correction_monomials",
    "build_stencil",
    "stencil_for_order",
    "trapezoidal",
    "punctured_trapezoidal",
    "locate_singularity",
    "corrected_Qp",
    "composite_Up",
    "symmetric_grid",
    "grid_with_offset",
]


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class Grid2:
    """Uniform axis-aligned grid: nodes at origin + h*(i, j).

    ``extent`` holds inclusive index ranges ((i_lo, i_hi), (j_lo, j_hi)); the
    grid owns every node with i_lo <= i <= i_hi, j_lo <= j <= j_hi.
    """

    h: float
    origin: tuple[float, float]
    extent: tuple[tuple[int, int], tuple[int, int]]

    def __post_init__(self) -> None:
        if not (self.h > 0.0):
            raise ValueError(f"grid spacing must be positive, got h={self.h}")
        (i0, i1), (j0, j1) = self.extent
        if i1 < i0 or j1 < j0:
            raise ValueError(f"empty grid extent {self.extent}")

    @property
    def shape(self) -> tuple[int, int]:
        (i0, i1), (j0, j1) = self.extent
        return (i1 - i0 + 1, j1 - j0 + 1)

    def axis_nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical node coordinates along each axis."""
        (i0, i1), (j0, j1) = self.extent
        xs = self.origin[0] + self.h * np.arange(i0, i1 + 1)
        ys = self.origin[1] + self.h * np.arange(j0, j1 + 1)
        return xs, ys

    def node_xy(self, i: int, j: int) -> tuple[float, float]:
        return (self.origin[0] + self.h * i, self.origin[1] + self.h * j)

    def contains_index(self, i: int, j: int) -> bool:
        (i0, i1), (j0, j1) = self.extent
        return i0 <= i <= i1 and j0 <= j <= j1


class SingularTerm:
    """One term s_k(x) = |x|**(k-1) * phi(x/|x|) of a singular-function expansion.

    phi is stored as uniform samples on [0, 2*pi) together with its Fourier
    coefficients; the sample count must be a power of two (>= 4) so the FFT
    round-trips exactly.
    """

    def __init__(self, k: int, samples: np.ndarray):
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        if k < 0 or k != int(k):
            raise ValueError(f"homogeneity index k must be a nonnegative integer, got {k}")
        if n < 4 or (n & (n - 1)) != 0:
            raise ValueError(f"phi sample count must be a power of two >= 4, got {n}")
        self.k = int(k)
        self.samples = samples
        c = np.fft.rfft(samples) / n
        a = 2.0 * c.real
        a[0] = c[0].real
        if n % 2 == 0:
            a[-1] = c[-1].real
        b = -2.0 * c.imag
        b[0] = 0.0
        if n % 2 == 0:
            b[-1] = 0.0
        self.a = a  # a[0] is the mean, a[j] multiplies cos(j*theta)
        self.b = b  # b[j] multiplies sin(j*theta)
        # reconstruction must reproduce the samples when all modes are kept
        theta = 2.0 * np.pi * np.arange(n) / n
        recon = self.phi(theta)
        scale = max(1.0, float(np.max(np.abs(samples))))
        err = float(np.max(np.abs(recon - samples)))
        if err > 1e-12 * scale:
            raise ValueError(
                f"phi samples are not consistent with their Fourier series "
                f"(reconstruction error {err:.3e}); sample a smooth periodic function"
            )

    # -- constructors ------------------------------------------------------

    @classmethod
    def from_callable(cls, k: int, phi: Callable[[np.ndarray], np.ndarray],
                      n: int = 4096) -> "SingularTerm":
        theta = 2.0 * np.pi * np.arange(n) / n
        return cls(k, np.asarray(phi(theta), dtype=float))

    @classmethod
    def from_coefficients(cls, k: int, a0: float,
                          a: Sequence[float] = (), b: Sequence[float] = (),
                          n: int | None = None) -> "SingularTerm":
        """Build from explicit cos/sin coefficients (a[j-1] multiplies cos(j t))."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        nmode = max(len(a), len(b))
        if n is None:
            n = 4
            while n < 4 * (nmode + 1):
                n *= 2
        theta = 2.0 * np.pi * np.arange(n) / n
        vals = np.full(n, float(a0))
        for j in range(1, nmode + 1):
            if j <= len(a) and a[j - 1] != 0.0:
                vals += a[j - 1] * np.cos(j * theta)
            if j <= len(b) and b[j - 1] != 0.0:
                vals += b[j - 1] * np.sin(j * theta)
        return cls(k, vals)

    # -- evaluation --------------------------------------------------------

    def active_modes(self, cutoff: float = 1e-15) -> list[int]:
        """Mode indices whose coefficients matter, relative to phi's size."""
        norm = max(float(np.max(np.abs(self.a))), float(np.max(np.abs(self.b))), 1e-300)
        out = [0]
        for j in range(1, len(self.a)):
            if abs(self.a[j]) + abs(self.b[j]) > cutoff * norm:
                out.append(j)
        return out

    def phi(self, theta: np.ndarray) -> np.ndarray:
        """Evaluate phi by summing its (truncated) Fourier series.

        Uses the cos/sin Chebyshev-style recurrence so the cost is one pair of
        multiply-adds per active mode, independent of how theta was produced.
        """
        theta = np.asarray(theta, dtype=float)
        modes = self.active_modes()
        out = np.full(theta.shape, self.a[0])
        if len(modes) <= 1:
            return out
        jmax = modes[-1]
        c1 = np.cos(theta)
        s1 = np.sin(theta)
        cj, sj = c1.copy(), s1.copy()
        for j in range(1, jmax + 1):
            if j > 1:
                cj, sj = c1 * cj - s1 * sj, s1 * cj + c1 * sj
            if abs(self.a[j]) > 0.0:
                out += self.a[j] * cj
            if abs(self.b[j]) > 0.0:
                out += self.b[j] * sj
        return out

    def evaluate(self, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
        """s_k at displacement (dx, dy) from the singular point."""
        dx = np.asarray(dx, dtype=float)
        dy = np.asarray(dy, dtype=float)
        r = np.hypot(dx, dy)
        theta = np.arctan2(dy, dx)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.k == 1:
                rad = np.ones_like(r)
            else:
                rad = r ** (self.k - 1)
        return rad * self.phi(theta)

    def __repr__(self) -> str:  # pragma: no cover
        return f"SingularTerm(k={self.k}, n={self.samples.size})"


@dataclasses.dataclass
class SingularFunction:
    """A singularity s(x) = s_0(x) + s_1(x) + ... plus the full callable.

    ``full(dx, dy)`` must be valid away from the origin.  The q-th remainder
    is full minus the first q+1 terms; it vanishes like |x|**q at the origin.
    """

    terms: list[SingularTerm]
    full: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def __post_init__(self) -> None:
        for idx, t in enumerate(self.terms):
            if t.k != idx:
                raise ValueError(f"terms must be ordered with k = 0,1,...; "
                                 f"slot {idx} holds k={t.k}")

    def partial(self, q: int, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
        """Sum of the terms s_0..s_q."""
        out = np.zeros(np.broadcast(dx, dy).shape)
        for t in self.terms[: q + 1]:
            out = out + t.evaluate(dx, dy)
        return out

    def remainder(self, q: int, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
        """full - (s_0 + ... + s_q); bounded by C*|x|**q near the origin."""
        if q + 1 > len(self.terms):
            raise ValueError(f"need terms through k={q} for the order-{q} remainder, "
                             f"have {len(self.terms)}")
        return np.asarray(self.full(dx, dy)) - self.partial(q, dx, dy)


@dataclasses.dataclass(frozen=True)
class GridOffset:
    """Dimensionless position of x0 inside its grid cell, plus the anchor node."""

    alpha: float
    beta: float
    anchor: tuple[int, int]


@dataclasses.dataclass(frozen=True)
class Stencil:
    """Correction stencil: p_tilde integer node offsets from the anchor."""

    p: int
    offsets: tuple[tuple[int, int], ...]

    @property
    def p_tilde(self) -> int:
        return len(self.offsets)

    def node_indices(self, anchor: tuple[int, int]) -> list[tuple[int, int]]:
        return [(anchor[0] + di, anchor[1] + dj) for (di, dj) in self.offsets]


# number of correction nodes used per order (at least p(p+1)/2)
PTILDE = {1: 1, 2: 4, 3: 6, 4: 12}

# frozen output of build_stencil(); kept literal so tables and tests can rely
# on the node ordering
STENCIL_OFFSETS: dict[int, tuple[tuple[int, int], ...]] = {
    1: ((0, 0),),
    2: ((0, 0), (1, 0), (1, 1), (0, 1)),
    3: ((0, 0), (1, 0), (1, 1), (0, 1), (2, 0), (1, 2)),
    4: ((0, 0), (1, 0), (1, 1), (0, 1),
        (2, 0), (2, 1), (1, 2), (0, 2), (-1, 1), (-1, 0), (0, -1), (1, -1)),
}


def correction_monomials(p: int) -> list[tuple[int, int]]:
    """Exponent pairs (a, b) of the monomial test functions for order p.

    All monomials of total degree <= p-1 (that is p(p+1)/2 of them), padded up
    to p_tilde with higher-degree ones.  The pad for p=2 is x*y.  For p=4 the
    pad must avoid x**4, y**4 and x**2*y**2: on the 12-node stencil those
    coincide with lower-degree combinations at every node (each node has
    |x-1/2| or |y-1/2| equal to 1/2 or 3/2 in cell-centered coordinates), so
    the test matrix would be exactly singular.  x**3*y and x*y**3 are the only
    degree-4 pair that stays independent.
    """
    if p not in PTILDE:
        raise ValueError(f"correction order must be 1..4, got {p}")
    monos = [(d - b, b) for d in range(p) for b in range(d + 1)]
    if p == 2:
        monos.append((1, 1))
    elif p == 4:
        monos.extend([(3, 1), (1, 3)])
    return monos


def _unisolvent(offsets: Sequence[tuple[int, int]], monos: Sequence[tuple[int, int]],
                probe: tuple[float, float] = (0.37, 0.21)) -> bool:
    """Check the monomial/node matrix is invertible at a generic cell offset."""
    u = np.array([(di - probe[0], dj - probe[1]) for (di, dj) in offsets])
    m = np.array([[x ** a * y ** b for (x, y) in u] for (a, b) in monos])
    if m.shape[0] != m.shape[1]:
        return False
    return np.linalg.cond(m) < 1e8


def build_stencil(p: int) -> Stencil:
    """Construct the order-p stencil around the anchor cell.

    Nodes are taken nearest the center of the unit cell [0,1]^2, tie-broken by
    angle from the anchor; a candidate that would make the monomial system
    singular is skipped in favor of the next one.  The result matches
    STENCIL_OFFSETS, which is the frozen form used everywhere else.
    """
    if p == 1:
        return Stencil(1, ((0, 0),))
    monos = correction_monomials(p)
    want = PTILDE[p]
    # candidates ordered by distance to cell center, then angle from anchor
    cand = []
    for di in range(-3, 5):
        for dj in range(-3, 5):
            d2 = (di - 0.5) ** 2 + (dj - 0.5) ** 2
            ang = math.atan2(dj, di) % (2.0 * math.pi) if (di, dj) != (0, 0) else -1.0
            cand.append((round(d2, 9), ang, (di, dj)))
    cand.sort()
    chosen: list[tuple[int, int]] = []
    for _, _, od in cand:
        if len(chosen) == want:
            break
        trial = chosen + [od]
        if len(trial) == want and not _unisolvent(trial, monos):
            continue
        chosen.append(od)
    if len(chosen) != want or not _unisolvent(chosen, monos):
        raise RuntimeError(f"could not build a unisolvent {want}-node stencil for p={p}")
    return Stencil(p, tuple(chosen))


def stencil_for_order(p: int) -> Stencil:
    """The frozen order-p correction stencil."""
    if p not in STENCIL_OFFSETS:
        raise ValueError(f"correction order must be 1..4, got {p}")
    return Stencil(p, STENCIL_OFFSETS[p])


# --------------------------------------------------------------------------
# plain and punctured sums
# --------------------------------------------------------------------------

def _kahan_rows(row_sums: np.ndarray) -> float:
    """Compensated sum of per-row partial sums (fixed, documented order).

    Rows are first reduced with np.sum (pairwise), then combined sequentially
    with Kahan compensation in increasing row index.  The reduction tree is
    therefore fixed by the grid shape alone, which keeps results deterministic
    and reproducible across runs.
    """
    total = 0.0
    comp = 0.0
    for v in row_sums:
        y = float(v) - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def _eval_rows(f, grid: Grid2, skip: set[tuple[int, int]] | None = None) -> float:
    """h^2 * sum of f over grid nodes, skipping the given index set.

    f may be a callable f(x, y) accepting 1D arrays, or an ndarray of node
    values shaped like grid.shape.  Skipped nodes are never evaluated.
    """
    (i0, i1), (j0, j1) = grid.extent
    xs, ys = grid.axis_nodes()
    is_arr = isinstance(f, np.ndarray)
    if is_arr and f.shape != grid.shape:
        raise ValueError(f"value array shape {f.shape} does not match grid {grid.shape}")
    row_sums = np.zeros(i1 - i0 + 1)
    for row, i in enumerate(range(i0, i1 + 1)):
        if skip:
            keep = np.array([(i, j) not in skip for j in range(j0, j1 + 1)])
        else:
            keep = None
        if is_arr:
            vals = f[row] if keep is None else f[row][keep]
        else:
            yy = ys if keep is None else ys[keep]
            xx = np.full(yy.shape, xs[row])
            vals = np.asarray(f(xx, yy), dtype=float)
        if vals.size and not np.all(np.isfinite(vals)):
            bad = int(np.flatnonzero(~np.isfinite(np.asarray(vals)))[0])
            jbad = (np.flatnonzero(keep)[bad] if keep is not None else bad) + j0
            raise ValueError(f"non-finite integrand value at grid node (i={i}, j={jbad}), "
                             f"x={grid.node_xy(i, jbad)}")
        row_sums[row] = np.sum(vals)
    return grid.h * grid.h * _kahan_rows(row_sums)


def trapezoidal(f, grid: Grid2) -> float:
    """Trapezoidal rule h^2 * sum f(node) over the whole grid.

    On smooth compactly supported integrands this is spectrally accurate; it
    is the baseline everything else corrects.
    """
    return _eval_rows(f, grid)


def punctured_trapezoidal(f, grid: Grid2, stencil: Stencil | None = None,
                          offset: GridOffset | None = None,
                          skip_indices: Sequence[tuple[int, int]] | None = None) -> float:
    """Trapezoidal rule with the stencil nodes (or an explicit index list) left out.

    The excluded nodes are never evaluated, so f may be singular there.
    """
    skip: set[tuple[int, int]] = set()
    if stencil is not None:
        if offset is None:
            raise ValueError("stencil given without its GridOffset")
        for idx in stencil.node_indices(offset.anchor):
            if not grid.contains_index(*idx):
                raise ValueError(f"excluded node {idx} lies outside the grid extent")
            skip.add(idx)
    if skip_indices is not None:
        for idx in skip_indices:
            if not grid.contains_index(*idx):
                raise ValueError(f"excluded node {idx} lies outside the grid extent")
            skip.add(tuple(idx))
    return _eval_rows(f, grid, skip)


# --------------------------------------------------------------------------
# locating the singular point
# --------------------------------------------------------------------------

def locate_singularity(x0: Sequence[float], grid: Grid2, p: int) -> tuple[Stencil, GridOffset]:
    """Anchor node, cell offset (alpha, beta) and stencil for a singular point.

    For p=1 the anchor is the nearest node and (alpha, beta) lands in
    [-1/2, 1/2)^2; for p>=2 it is the lower-left corner of the containing
    cell and (alpha, beta) lands in [0, 1)^2.
    """
    stencil = stencil_for_order(p)
    tx = (x0[0] - grid.origin[0]) / grid.h
    ty = (x0[1] - grid.origin[1]) / grid.h
    if p == 1:
        ia, ja = math.floor(tx + 0.5), math.floor(ty + 0.5)
    else:
        ia, ja = math.floor(tx), math.floor(ty)
    off = GridOffset(alpha=tx - ia, beta=ty - ja, anchor=(ia, ja))
    # the stencil must fit inside the grid with one extra node of margin
    (i0, i1), (j0, j1) = grid.extent
    diam = max(max(abs(di), abs(dj)) for di, dj in stencil.offsets) + 1
    for (ii, jj) in stencil.node_indices(off.anchor):
        if not (i0 + 0 <= ii <= i1 and j0 <= jj <= j1):
            raise ValueError(f"stencil node {(ii, jj)} falls outside the grid; "
                             f"x0={tuple(x0)} is too close to the boundary")
    if not (i0 + diam <= ia <= i1 - diam and j0 + diam <= ja <= j1 - diam):
        raise ValueError(f"x0={tuple(x0)} is within one stencil diameter of the "
                         f"grid boundary (anchor {(ia, ja)})")
    return stencil, off


# --------------------------------------------------------------------------
# corrected rules
# --------------------------------------------------------------------------

def _correction_weights(term: SingularTerm, offset: GridOffset, stencil: Stencil,
                        table=None, weights=None) -> np.ndarray:
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if w.size != stencil.p_tilde:
            raise ValueError(f"expected {stencil.p_tilde} weights, got {w.size}")
        return w
    if table is not None:
        from . import weights as _weights
        return _weights.interpolate_weights(table, term, offset)
    from . import weights as _weights
    w, _hstar = _weights.weights_limit(term, offset, stencil)
    return w


def corrected_Qp(term: SingularTerm, v: Callable, x0: Sequence[float], grid: Grid2,
                 p: int, table=None, weights=None) -> float:
    """Order-p corrected trapezoidal rule for s_k(x - x0) * v(x).

    The punctured sum runs over every grid node outside the stencil; the
    correction adds h**(k+1) * sum_i w_i * v(node_i) over the stencil nodes.
    Weights come from an explicit array, a weight table, or (by default) a
    direct limit computation.
    """
    stencil, offset = locate_singularity(x0, grid, p)

    def f(x, y):
        return term.evaluate(x - x0[0], y - x0[1]) * v(x, y)

    t0 = punctured_trapezoidal(f, grid, stencil, offset)
    w = _correction_weights(term, offset, stencil, table=table, weights=weights)
    nodes = stencil.node_indices(offset.anchor)
    vx = np.array([float(v(*map(np.asarray, grid.node_xy(i, j)))) for (i, j) in nodes])
    corr = grid.h ** (term.k + 1) * float(np.dot(w, vx))
    return t0 + corr


def composite_Up(s: SingularFunction, v: Callable, x0: Sequence[float], grid: Grid2,
                 p: int, tables=None, weights_by_k=None) -> float:
    """Composite corrected rule of order p for s(x - x0) * v(x), 2 <= p <= 5.

    Applies the order-(p-1-k) correction to each expansion term s_k,
    k = 0..p-2, assembled in a single pass:

    * full s*v summed outside the largest stencil (the one for s_0),
    * partial re-additions of s_k*v on the ring between the largest stencil
      and the smaller one that s_k actually uses,
    * all stencil corrections h**(k+1) * sum w_i[s_k] * v,
    * the remainder s - s_0 - ... - s_{p-3} re-added on the largest stencil
      minus the anchor (where only the k=p-2 correction, a bare one-node rule,
      is active).

    ``tables`` may map k to a WeightTable; ``weights_by_k`` may map k to an
    explicit weight array (used in tests).
    """
    if not 2 <= p <= 5:
        raise ValueError(f"composite rule supports p = 2..5, got {p}")
    if len(s.terms) < p - 1:
        raise ValueError(f"composite rule of order {p} needs expansion terms "
                         f"s_0..s_{p-2}; have {len(s.terms)}")
    h = grid.h
    # stencil and offset per correction order q = p-1-k
    located = {q: locate_singularity(x0, grid, q) for q in range(1, p)}
    big_stencil, big_off = located[p - 1]
    big_nodes = big_stencil.node_indices(big_off.anchor)
    big_set = set(big_nodes)

    def fv(x, y):
        return np.asarray(s.full(x - x0[0], y - x0[1])) * v(x, y)

    total = punctured_trapezoidal(fv, grid, skip_indices=list(big_set))

    def node_vals(term: SingularTerm, indices):
        out = 0.0
        for (i, j) in indices:
            x, y = grid.node_xy(i, j)
            out += float(term.evaluate(np.asarray(x - x0[0]), np.asarray(y - x0[1]))
                         * v(np.asarray(x), np.asarray(y)))
        return out

    # per-term corrections + ring re-additions
    for k in range(0, p - 1):
        q = p - 1 - k
        stencil, off = located[q]
        term = s.terms[k]
        if 1 <= k <= p - 3:
            ring = [idx for idx in big_nodes
                    if idx not in set(stencil.node_indices(off.anchor))]
            total += h * h * node_vals(term, ring)
        table = tables.get(k) if tables else None
        wexp = weights_by_k.get(k) if weights_by_k else None
        w = _correction_weights(term, off, stencil, table=table, weights=wexp)
        vx = np.array([float(v(*map(np.asarray, grid.node_xy(i, j))))
                       for (i, j) in stencil.node_indices(off.anchor)])
        total += h ** (k + 1) * float(np.dot(w, vx))

    # remainder on the largest stencil minus the anchor
    anchor_idx = located[1][0].node_indices(located[1][1].anchor)[0]
    rest = [idx for idx in big_nodes if idx != anchor_idx]
    qrem = p - 3
    for (i, j) in rest:
        x, y = grid.node_xy(i, j)
        dx, dy = np.asarray(x - x0[0]), np.asarray(y - x0[1])
        val = np.asarray(s.full(dx, dy))
        if qrem >= 0:
            val = val - s.partial(qrem, dx, dy)
        total += h * h * float(val * v(np.asarray(x), np.asarray(y)))
    return total


# --------------------------------------------------------------------------
# grid helpers for convergence studies
# --------------------------------------------------------------------------

def symmetric_grid(h: float, half_width: float, origin: tuple[float, float] = (0.0, 0.0)) -> Grid2:
    """Grid covering [-half_width, half_width]^2 around origin."""
    n = int(math.ceil(half_width / h))
    return Grid2(h=h, origin=origin, extent=((-n, n), (-n, n)))


def grid_with_offset(h: float, half_width: float, x0: Sequence[float],
                     alpha: float, beta: float) -> Grid2:
    """Grid arranged so x0 sits at cell offset (alpha, beta) at this spacing.

    Convergence studies refine h while keeping (alpha, beta) fixed; the grid
    origin absorbs the shift.  The window is centered on x0.
    """
    origin = (x0[0] - h * alpha, x0[1] - h * beta)
    n = int(math.ceil(half_width / h)) + 4
    return Grid2(h=h, origin=origin, extent=((-n, n), (-n, n)))
