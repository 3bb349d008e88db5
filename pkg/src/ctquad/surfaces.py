"""Analytic test surfaces for the volumetric layer-potential quadratures.

Every surface here is a closed level set presented through the same small
interface (duck-typed, no base class required):

``distance(x)``
    signed distance to the surface, negative inside, vectorized over the
    leading axes of ``x`` with shape ``(..., 3)``;
``project(x)``
    closest point on the surface (raises near the medial axis where the
    projection is not unique);
``normal(x)``
    unit gradient of the signed distance (points outward);
``reach``
    largest tube half-width on which the projection is single valued;
``bounding_box``
    ``(lo, hi)`` corners of an axis-aligned box containing the surface.

The tilted torus is the standard convergence fixture: its pose is generic so
an axis-aligned grid shares no symmetry with it, yet distance, projection,
frames, curvatures and a surface parametrization are all available in closed
form.  A high-accuracy parametric quadrature for the layer potentials on the
torus (`layer_potential_oracle`) provides reference values that are
independent of the volumetric quadrature under test.
"""

from __future__ import annotations

import dataclasses
import json
from importlib import resources

import numpy as np

from .weights import BumpFunction

__all__ = [
    "TorusSpec",
    "TiltedTorus",
    "Sphere",
    "CubicGraph",
    "tilted_torus",
    "torus_density",
    "random_targets",
    "surface_kernel",
    "layer_potential_oracle",
    "NonUniqueProjectionError",
]


class NonUniqueProjectionError(ValueError):
    """Raised when a point is (numerically) on the medial axis of a surface."""


def rotation_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# tilted torus
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class TorusSpec:
    """Torus geometry plus a rigid pose (rotate about x, then y, then z; shift)."""

    R1: float
    R2: float
    angles: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if not 0.0 < self.R2 < self.R1:
            raise ValueError(f"need 0 < R2 < R1, got R1={self.R1}, R2={self.R2}")

    @property
    def rotation(self) -> np.ndarray:
        a, b, c = self.angles
        return rotation_z(c) @ rotation_y(b) @ rotation_x(a)


class TiltedTorus:
    """Closed torus with exact signed distance, projection and local frames.

    In the untilted frame the surface is the set |(hypot(x, y) - R1, z)| = R2;
    the world pose applies the spec's rotation and translation.
    """

    def __init__(self, spec: TorusSpec):
        self.spec = spec
        self._rot = spec.rotation  # local -> world
        self._center = np.asarray(spec.center, dtype=float)
        # the medial axis consists of the tube's center circle (distance R2)
        # and the symmetry axis (distance >= R1 - R2); the reach is the smaller
        self.reach = min(spec.R2, spec.R1 - spec.R2)

    # -- pose ---------------------------------------------------------------

    def to_local(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x - self._center) @ self._rot

    def to_world(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return u @ self._rot.T + self._center

    # -- level-set interface --------------------------------------------------

    def distance(self, x: np.ndarray) -> np.ndarray:
        u = self.to_local(x)
        ring = np.hypot(u[..., 0], u[..., 1]) - self.spec.R1
        return np.hypot(ring, u[..., 2]) - self.spec.R2

    def _tube_vector(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Local offset from the tube's center circle, and its length."""
        rho = np.hypot(u[..., 0], u[..., 1])
        if np.any(rho < 1e-12):
            raise NonUniqueProjectionError(
                "point on the torus symmetry axis has no unique closest point")
        scale = self.spec.R1 / rho
        ring = np.stack([u[..., 0] * scale, u[..., 1] * scale,
                         np.zeros_like(rho)], axis=-1)
        v = u - ring
        vnorm = np.linalg.norm(v, axis=-1)
        if np.any(vnorm < 1e-12):
            raise NonUniqueProjectionError(
                "point on the tube center circle has no unique closest point")
        return ring, v

    def project(self, x: np.ndarray) -> np.ndarray:
        u = self.to_local(x)
        ring, v = self._tube_vector(u)
        vnorm = np.linalg.norm(v, axis=-1, keepdims=True)
        return self.to_world(ring + v * (self.spec.R2 / vnorm))

    def normal(self, x: np.ndarray) -> np.ndarray:
        u = self.to_local(x)
        _, v = self._tube_vector(u)
        v = v / np.linalg.norm(v, axis=-1, keepdims=True)
        return v @ self._rot.T

    @property
    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        r = self.spec.R1 + self.spec.R2
        return self._center - r, self._center + r

    # -- parametrization ------------------------------------------------------

    def param_point(self, theta, phi) -> np.ndarray:
        """World point at tube angle theta and ring angle phi."""
        theta = np.asarray(theta, dtype=float)
        phi = np.asarray(phi, dtype=float)
        ring = self.spec.R1 + self.spec.R2 * np.cos(theta)
        u = np.stack([ring * np.cos(phi), ring * np.sin(phi),
                      self.spec.R2 * np.sin(theta) * np.ones_like(phi)], axis=-1)
        return self.to_world(u)

    def parameters(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Angles (theta, phi) of the closest surface point to x.

        atan2 branch: both angles land in (-pi, pi]; every consumer here is
        2*pi-periodic so the branch never matters.
        """
        u = self.to_local(x)
        phi = np.arctan2(u[..., 1], u[..., 0])
        ring = np.hypot(u[..., 0], u[..., 1]) - self.spec.R1
        theta = np.arctan2(u[..., 2], ring)
        return theta, phi

    def param_frame(self, theta, phi) -> dict[str, np.ndarray]:
        """Orthonormal tangent/normal frame and area element at (theta, phi).

        Returns unit tangents along the tube circle (t_theta) and the ring
        direction (t_phi), the outward normal, and the area element
        dsigma = R2*(R1 + R2*cos(theta)) per unit dtheta dphi.
        """
        theta = np.asarray(theta, dtype=float)
        phi = np.asarray(phi, dtype=float)
        ct, st = np.cos(theta), np.sin(theta)
        cp, sp = np.cos(phi), np.sin(phi)
        zeros = np.zeros(np.broadcast(ct, cp).shape)
        t_theta = np.stack([-st * cp, -st * sp, ct + zeros], axis=-1)
        t_phi = np.stack([-sp + zeros, cp + zeros, zeros], axis=-1)
        n = np.stack([ct * cp, ct * sp, st + zeros], axis=-1)
        rot = self._rot.T
        return {
            "t_theta": t_theta @ rot,
            "t_phi": t_phi @ rot,
            "normal": n @ rot,
            "dsigma": self.spec.R2 * (self.spec.R1 + self.spec.R2 * ct) + zeros,
        }

    def exact_probe(self, x: np.ndarray):
        """Exact local geometry (frame + curvatures) at the point closest to x.

        Curvatures follow the local-graph convention: the surface is written
        as a height function over the tangent plane with height measured along
        the outward normal, and kappa_i are the eigenvalues of that height
        function's Hessian.  A convex-outward surface (sphere, outer side of
        the tube) therefore has negative curvatures.  kappa1 <= kappa2, and
        (tau1, tau2, n) is right-handed with the same deterministic sign
        canonicalization used by the finite-difference probe.
        """
        from .geometry import SurfaceProbe, canonical_tangent_frame

        p = self.project(x)
        theta, phi = self.parameters(p)
        fr = self.param_frame(theta, phi)
        k_tube = -1.0 / self.spec.R2
        k_ring = -np.cos(theta) / (self.spec.R1 + self.spec.R2 * np.cos(theta))
        pairs = sorted([(float(k_tube), fr["t_theta"]), (float(k_ring), fr["t_phi"])],
                       key=lambda kv: kv[0])
        (k1, t1), (k2, _) = pairs
        tau1, tau2, n = canonical_tangent_frame(t1, fr["normal"])
        return SurfaceProbe(xstar=p, tau1=tau1, tau2=tau2, n=n,
                            kappa1=k1, kappa2=k2, f3=None, source="analytic")

    def density_at(self, x: np.ndarray, coefficients=None) -> np.ndarray:
        """Sample the parametric test density at the closest surface point."""
        theta, phi = self.parameters(x)
        return torus_density(theta, phi, coefficients)

    def level_jacobian(self, x: np.ndarray) -> np.ndarray:
        """Exact area ratio dsigma_surface / dsigma_level at offset points.

        For a point at signed distance eta whose foot has principal curvatures
        kappa_i (height-function convention, negative when convex outward) the
        ratio is 1 / ((1 - eta*kappa1) * (1 - eta*kappa2)).
        """
        eta = self.distance(x)
        theta, _ = self.parameters(x)
        k_tube = -1.0 / self.spec.R2
        k_ring = -np.cos(theta) / (self.spec.R1 + self.spec.R2 * np.cos(theta))
        return 1.0 / ((1.0 - eta * k_tube) * (1.0 - eta * k_ring))


_DEFAULT_DENSITY = (1.38, 2.196, -0.29837, 1.128)


def torus_density(theta, phi, coefficients=None) -> np.ndarray:
    """Smooth test density on the torus, written in its surface angles."""
    c0, c1, c2, c3 = _DEFAULT_DENSITY if coefficients is None else coefficients
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    return (c0 + c1 * np.sin(theta) + c2 * np.cos(phi) * np.sin(theta)
            + c3 * np.sin(phi) * np.cos(theta))


def tilted_torus() -> TiltedTorus:
    """The packaged generic-pose torus fixture."""
    text = resources.files("ctquad").joinpath("data/tilted_torus.json").read_text()
    raw = json.loads(text)
    spec = TorusSpec(R1=raw["R1"], R2=raw["R2"],
                     angles=tuple(raw["angles"]), center=tuple(raw["center"]))
    return TiltedTorus(spec)


def random_targets(count: int, seed: int) -> np.ndarray:
    """Reproducible target-point parameters (theta, phi), shape (count, 2)."""
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 2.0 * np.pi, size=(count, 2))


# ---------------------------------------------------------------------------
# sphere
# ---------------------------------------------------------------------------

class Sphere:
    """Sphere level set; the exact-answer oracle surface."""

    def __init__(self, radius: float, center=(0.0, 0.0, 0.0)):
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)
        self.reach = self.radius

    def _offset(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        v = np.asarray(x, dtype=float) - self.center
        r = np.linalg.norm(v, axis=-1)
        if np.any(r < 1e-12):
            raise NonUniqueProjectionError("sphere center has no unique closest point")
        return v, r

    def distance(self, x: np.ndarray) -> np.ndarray:
        v = np.asarray(x, dtype=float) - self.center
        return np.linalg.norm(v, axis=-1) - self.radius

    def project(self, x: np.ndarray) -> np.ndarray:
        v, r = self._offset(x)
        return self.center + v * (self.radius / r)[..., None]

    def normal(self, x: np.ndarray) -> np.ndarray:
        v, r = self._offset(x)
        return v / r[..., None]

    @property
    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.center - self.radius, self.center + self.radius

    def exact_probe(self, x: np.ndarray):
        from .geometry import SurfaceProbe, canonical_tangent_frame

        p = self.project(x)
        n = self.normal(p)
        # umbilic point: any tangent direction is principal; use the same
        # deterministic tie-break as the finite-difference probe
        seed = np.array([1.0, 0.0, 0.0])
        if abs(n[0]) > 1.0 - 1e-6:
            seed = np.array([0.0, 1.0, 0.0])
        t1 = seed - n * (seed @ n)
        tau1, tau2, n = canonical_tangent_frame(t1, n)
        k = -1.0 / self.radius
        return SurfaceProbe(xstar=p, tau1=tau1, tau2=tau2, n=n,
                            kappa1=k, kappa2=k, f3=(0.0, 0.0, 0.0, 0.0),
                            source="analytic")

    def level_jacobian(self, x: np.ndarray) -> np.ndarray:
        """Exact area ratio dsigma_surface / dsigma_level at offset points."""
        eta = self.distance(x)
        return (self.radius / (self.radius + eta)) ** 2


# ---------------------------------------------------------------------------
# graph of a cubic polynomial (local patch for probe validation)
# ---------------------------------------------------------------------------

class CubicGraph:
    """Local surface patch z = q(x, y), q a polynomial with q(0)=|grad q(0)|=0.

    q(x, y) = 0.5*(k1*x^2 + k2*y^2) + c30*x^3 + c21*x^2*y + c12*x*y^2 + c03*y^3.
    The closest-point projection is found by Newton iteration on the in-plane
    coordinates, which converges for points close to the patch center when the
    coefficients are small.  Intended for validating geometry probes against
    known derivatives, not as a closed test surface.
    """

    def __init__(self, k1: float, k2: float, c30: float, c21: float,
                 c12: float, c03: float):
        self.k1, self.k2 = float(k1), float(k2)
        self.c30, self.c21, self.c12, self.c03 = map(float, (c30, c21, c12, c03))
        self.reach = 1.0

    def height(self, x, y):
        return (0.5 * (self.k1 * x * x + self.k2 * y * y)
                + self.c30 * x**3 + self.c21 * x * x * y
                + self.c12 * x * y * y + self.c03 * y**3)

    def slope(self, x, y):
        gx = self.k1 * x + 3 * self.c30 * x * x + 2 * self.c21 * x * y + self.c12 * y * y
        gy = self.k2 * y + self.c21 * x * x + 2 * self.c12 * x * y + 3 * self.c03 * y * y
        return gx, gy

    def _curvature_terms(self, x, y):
        qxx = self.k1 + 6 * self.c30 * x + 2 * self.c21 * y
        qyy = self.k2 + 2 * self.c12 * x + 6 * self.c03 * y
        qxy = 2 * self.c21 * x + 2 * self.c12 * y
        return qxx, qxy, qyy

    def _foot(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """In-plane coordinates of the closest graph point under each input."""
        p = np.asarray(p, dtype=float)
        x = np.array(p[..., 0], dtype=float, copy=True)
        y = np.array(p[..., 1], dtype=float, copy=True)
        step = np.inf
        for _ in range(60):
            q = self.height(x, y)
            gx, gy = self.slope(x, y)
            rz = q - p[..., 2]
            # gradient of 0.5*|(x, y, q(x, y)) - p|^2 in (x, y)
            f1 = x - p[..., 0] + rz * gx
            f2 = y - p[..., 1] + rz * gy
            qxx, qxy, qyy = self._curvature_terms(x, y)
            j11 = 1.0 + gx * gx + rz * qxx
            j12 = gx * gy + rz * qxy
            j22 = 1.0 + gy * gy + rz * qyy
            det = j11 * j22 - j12 * j12
            dx = (j22 * f1 - j12 * f2) / det
            dy = (j11 * f2 - j12 * f1) / det
            x -= dx
            y -= dy
            step = float(np.max(np.hypot(dx, dy)))
            if step < 1e-15:
                break
        if step > 1e-10:
            raise NonUniqueProjectionError(
                f"projection onto the graph did not converge (last step {step:.2e})")
        return x, y

    def project(self, p: np.ndarray) -> np.ndarray:
        x, y = self._foot(p)
        return np.stack([x, y, self.height(x, y)], axis=-1)

    def distance(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        foot = self.project(p)
        gap = p - foot
        side = np.sign(p[..., 2] - self.height(p[..., 0], p[..., 1]))
        return side * np.linalg.norm(gap, axis=-1)

    def normal(self, p: np.ndarray) -> np.ndarray:
        x, y = self._foot(p)
        gx, gy = self.slope(x, y)
        n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# direct surface kernels and the parametric reference quadrature
# ---------------------------------------------------------------------------

def surface_kernel(kind: str, xstar: np.ndarray, nx: np.ndarray,
                   y: np.ndarray, ny: np.ndarray) -> np.ndarray:
    """Laplace layer kernel between on-surface points.

    kind 'SL' is the free-space Green's function 1/(4*pi*|x*-y|); 'DL' is its
    derivative along the normal at y, (x*-y).ny / (4*pi*|x*-y|^3); 'DLC' the
    derivative along the normal at x*, -(x*-y).nx / (4*pi*|x*-y|^3).
    """
    diff = np.asarray(xstar, dtype=float) - np.asarray(y, dtype=float)
    r = np.linalg.norm(diff, axis=-1)
    if kind == "SL":
        return 1.0 / (4.0 * np.pi * r)
    if kind == "DL":
        return np.sum(diff * ny, axis=-1) / (4.0 * np.pi * r**3)
    if kind == "DLC":
        return -np.sum(diff * nx, axis=-1) / (4.0 * np.pi * r**3)
    raise ValueError(f"unknown kernel kind {kind!r}")


def layer_potential_oracle(torus: TiltedTorus, kind: str, theta0: float,
                           phi0: float, rho=None, *, n_far: int = 1024,
                           n_radial: int = 128, n_angular: int = 512,
                           cutoff: float = 0.12) -> float:
    """Reference layer-potential value on the torus by parametric quadrature.

    The target sits on the surface, so the integrand has an integrable
    point singularity there.  A smooth radial cutoff splits the integral:
    the far part (cutoff applied) is periodic and smooth, handled by the
    tensor trapezoidal rule which converges spectrally; the near part is
    integrated in polar coordinates around the target in parameter space,
    where multiplying by the polar radius removes the singularity, using
    Gauss-Legendre radially and the trapezoidal rule angularly.

    rho: surface density, called as rho(theta, phi); defaults to 1.
    """
    if rho is None:
        def rho(theta, phi):
            return np.ones(np.broadcast(np.asarray(theta), np.asarray(phi)).shape)

    xstar = torus.param_point(theta0, phi0)
    nx = torus.param_frame(theta0, phi0)["normal"]
    window = BumpFunction(r0=0.5, R=1.0)  # =1 for chord <= cutoff/2, =0 beyond cutoff

    def integrand(theta, phi, near: bool) -> np.ndarray:
        y = torus.param_point(theta, phi)
        fr = torus.param_frame(theta, phi)
        chord = np.linalg.norm(y - xstar, axis=-1)
        vals = np.zeros(chord.shape)
        if near:
            mask = chord < cutoff
            weight = np.zeros(chord.shape)
            weight[mask] = window(chord[mask] / cutoff)
        else:
            mask = chord > 0.5 * cutoff
            weight = np.zeros(chord.shape)
            weight[mask] = 1.0 - window(chord[mask] / cutoff)
        if not np.any(mask):
            return vals
        ker = surface_kernel(kind, xstar, nx, y[mask], fr["normal"][mask])
        vals[mask] = weight[mask] * ker * rho(theta[mask], phi[mask]) * fr["dsigma"][mask]
        return vals

    # far part: periodic tensor trapezoid over the full parameter torus
    th = 2.0 * np.pi * np.arange(n_far) / n_far
    ph = 2.0 * np.pi * np.arange(n_far) / n_far
    TH, PH = np.meshgrid(th, ph, indexing="ij")
    far = float(np.sum(integrand(TH, PH, near=False))) * (2.0 * np.pi / n_far) ** 2

    # near part: polar coordinates in the parameter plane around the target.
    # chord^2 = 4 R2^2 sin^2(dtheta/2) + 4 rho rho0 sin^2(dphi/2) gives
    # chord >= (2/pi) min(R2, R1-R2) r, so the disk below covers the support
    # of the cutoff (and stays inside one period: rmax <= pi for our radii)
    rmax = 0.5 * np.pi * cutoff / min(torus.spec.R2, torus.spec.R1 - torus.spec.R2)
    if rmax > np.pi:
        raise ValueError("cutoff too large for a single-period polar patch")
    nodes, wts = np.polynomial.legendre.leggauss(n_radial)
    r = 0.5 * rmax * (nodes + 1.0)
    rw = 0.5 * rmax * wts
    gamma = 2.0 * np.pi * np.arange(n_angular) / n_angular
    R, G = np.meshgrid(r, gamma, indexing="ij")
    TH = theta0 + R * np.cos(G)
    PH = phi0 + R * np.sin(G)
    vals = integrand(TH, PH, near=True) * R
    near = float(rw @ np.sum(vals, axis=1)) * (2.0 * np.pi / n_angular)

    return far + near
