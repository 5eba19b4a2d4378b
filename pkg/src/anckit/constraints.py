"""Robust-stability constraints under IMC, their gradients, and a geometric oracle.

With C = Q / (1 - G_hat Q), the critical point -1 lies in C * G_set exactly when
0 lies in 1 + Q (G_set - G_hat).  Every constraint g below is negative iff -1 is
excluded at that bin.  Gradients are returned in complex form

    grad_c = dg/dRe(Q) + j dg/dIm(Q),

so that dg/dw_n = Re(conj(grad_c) exp(-j n W_k)) for Q_k = sum_n w_n exp(-j n W_k).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from anckit.errors import ConfigurationError
from anckit.geometry import ConvexHull2D, Disk, Ellipse, MultiDisk
from anckit.sigproc import dft_matrix

# |Q| below this is treated as "no control": feasible by convention
Q_ZERO = 1e-12


@dataclass
class ConstraintConfig:
    g_hat: np.ndarray
    rho: float = 50.0
    eps_feas: float = 1e-8
    disk_mode: str = "exact"  # or "convex": sufficient |Q|(|c - G_hat| + r) < 1

    def __post_init__(self):
        self.g_hat = np.asarray(self.g_hat, dtype=complex).ravel()
        if not self.rho > 0:
            raise ConfigurationError("smooth-min sharpness rho must be positive")
        if self.eps_feas < 0:
            raise ConfigurationError("eps_feas must be >= 0")
        if not np.all(np.isfinite(self.g_hat)):
            raise ConfigurationError("internal model must be finite at all bins")
        if self.disk_mode not in ("exact", "convex"):
            raise ConfigurationError(f"unknown disk mode {self.disk_mode!r}")


def _unit(Q):
    mag = np.abs(Q)
    safe = np.where(mag > 0, mag, 1.0)
    # componentwise: complex-by-real division overflows for subnormal magnitudes
    return np.where(mag > 0, Q.real / safe + 1j * (Q.imag / safe), 0.0), mag


# -- vectorized kernels (broadcast over bins and pieces) ----------------------

def disk_values(Q, centers, radii, g_hat, grad=False, mode="exact"):
    Q = np.asarray(Q, dtype=complex)
    d = np.asarray(centers) - g_hat
    u, mag = _unit(Q)
    if mode == "convex":
        k = np.abs(d) + radii
        g = mag * k - 1.0
        return (g, k * u) if grad else g
    v = 1.0 + Q * d
    vu, vmag = _unit(v)
    g = radii * mag - vmag
    if not grad:
        return g
    return g, radii * u - vu * np.conj(d)


def disk_values_squared(Q, centers, radii, g_hat, grad=False, mode="exact"):
    """Disk constraint with both sides squared: same sign, but smooth at Q = 0."""
    Q = np.asarray(Q, dtype=complex)
    d = np.asarray(centers) - g_hat
    if mode == "convex":
        k2 = (np.abs(d) + radii) ** 2
        g = k2 * np.abs(Q) ** 2 - 1.0
        return (g, 2 * k2 * Q) if grad else g
    v = 1.0 + Q * d
    r2 = np.asarray(radii) ** 2
    g = r2 * np.abs(Q) ** 2 - np.abs(v) ** 2
    if not grad:
        return g
    return g, 2 * r2 * Q - 2 * np.conj(d) * v


def ellipse_values(Q, centers, a, b, theta, g_hat, grad=False):
    Q = np.asarray(Q, dtype=complex)
    x, y = Q.real, Q.imag
    q2 = x * x + y * y
    rot = np.exp(1j * np.asarray(theta))
    dc = np.conj(np.asarray(centers) - g_hat)
    eta = rot * (Q + q2 * dc)
    xa, xb = eta.real, eta.imag
    g = q2 * q2 - xa * xa / a ** 2 - xb * xb / b ** 2
    if not grad:
        return g
    dx = rot * (1.0 + 2.0 * x * dc)
    dy = rot * (1j + 2.0 * y * dc)
    gx = 4 * q2 * x - 2 * xa * dx.real / a ** 2 - 2 * xb * dx.imag / b ** 2
    gy = 4 * q2 * y - 2 * xa * dy.real / a ** 2 - 2 * xb * dy.imag / b ** 2
    return g, gx + 1j * gy


def hull_psi(Q, angles, offsets, g_hat, grad=False):
    """Per-halfspace terms psi_m (shape (..., H)); -1 is inside iff all psi_m >= 0."""
    Q = np.asarray(Q, dtype=complex)[..., None]
    gh = np.asarray(g_hat, dtype=complex)[..., None]
    x, y = Q.real, Q.imag
    q2 = x * x + y * y
    rot = np.exp(1j * np.asarray(angles))
    beta = Q - q2 * np.conj(gh)
    psi = (rot * beta).real - q2 * offsets
    if not grad:
        return psi
    gx = (rot * (1.0 - 2.0 * x * np.conj(gh))).real - 2 * x * offsets
    gy = (rot * (1j - 2.0 * y * np.conj(gh))).real - 2 * y * offsets
    return psi, gx + 1j * gy


def soft_min(psi, dpsi, mask, rho, conservative=False):
    """Scale-adaptive log-sum-exp minimum over the last axis.

    The sharpness is rho / max|psi| per row.  With ``conservative=True`` the
    log-mean form is used, which never falls below the exact minimum.
    """
    psi = np.where(mask, psi, 0.0)
    absval = np.where(mask, np.abs(psi), -1.0)
    j = np.argmax(absval, axis=-1)[..., None]
    s = np.take_along_axis(np.abs(psi), j, -1)[..., 0]
    ds = (np.sign(np.take_along_axis(psi, j, -1)) * np.take_along_axis(dpsi, j, -1))[..., 0]
    safe = np.where(s > 0, s, 1.0)
    z = np.where(mask, -rho * psi / safe[..., None], -np.inf)
    lse = logsumexp(z, axis=-1)
    p = np.exp(z - lse[..., None])
    value = -(safe / rho) * lse
    coef = -lse / rho - np.sum(p * psi, axis=-1) / safe
    if conservative:
        log_h = np.log(np.sum(mask, axis=-1))
        value = value + safe * log_h / rho
        coef = coef + log_h / rho
    grad = np.sum(p * dpsi, axis=-1) + coef * ds
    zero = s == 0
    return np.where(zero, 0.0, value), np.where(zero, 0.0, grad)


def hard_min(psi, dpsi, mask):
    masked = np.where(mask, psi, np.inf)
    j = np.argmin(masked, axis=-1)[..., None]
    return (np.take_along_axis(masked, j, -1)[..., 0],
            np.take_along_axis(dpsi, j, -1)[..., 0])


# -- single-bin API ----------------------------------------------------------

def constraint_disk(Q, disk: Disk, g_hat, mode="exact", grad=False):
    """|Q| r - |1 + Q (c - G_hat)|; negative iff -1 is excluded."""
    out = disk_values(Q, disk.center, disk.radius, g_hat, grad, mode)
    return tuple(np.asarray(o)[()] for o in out) if grad else np.asarray(out)[()]


def constraint_multi_disk(Q, md: MultiDisk, g_hat, mode="exact", grad=False):
    """Worst member of the union: exclusion needs every disk to exclude -1."""
    Q = np.asarray(Q, dtype=complex)
    g, gc = disk_values(Q[..., None], md.centers, md.radii, g_hat, True, mode)
    j = np.argmax(g, axis=-1)[..., None]
    val = np.take_along_axis(g, j, -1)[..., 0]
    if not grad:
        return val[()]
    return val[()], np.take_along_axis(gc, j, -1)[..., 0][()]


def constraint_ellipse(Q, e: Ellipse, g_hat, grad=False):
    out = ellipse_values(Q, e.center, e.a, e.b, e.theta, g_hat, grad)
    return tuple(np.asarray(o)[()] for o in out) if grad else np.asarray(out)[()]


def constraint_hull(Q, h: ConvexHull2D, g_hat, rho: float | None = None, grad=False,
                    conservative=False):
    """Minimum of the halfspace terms; smoothed by log-sum-exp when ``rho`` is given."""
    psi, dpsi = hull_psi(Q, h.angles, h.offsets, g_hat, grad=True)
    mask = np.ones(psi.shape, dtype=bool)
    if rho is None:
        val, gc = hard_min(psi, dpsi, mask)
    else:
        val, gc = soft_min(psi, dpsi, mask, rho, conservative)
    return (val[()], gc[()]) if grad else val[()]


def constraint_value(Q, bin_model, g_hat, rho=None, mode="exact"):
    """Exact (or, for hulls with ``rho``, smoothed) constraint of any bin model."""
    if isinstance(bin_model, Disk):
        return constraint_disk(Q, bin_model, g_hat, mode)
    if isinstance(bin_model, MultiDisk):
        return constraint_multi_disk(Q, bin_model, g_hat, mode)
    if isinstance(bin_model, Ellipse):
        return constraint_ellipse(Q, bin_model, g_hat)
    if isinstance(bin_model, ConvexHull2D):
        return constraint_hull(Q, bin_model, g_hat, rho)
    raise TypeError(type(bin_model).__name__)


# -- all bins at once ----------------------------------------------------------

class BinConstraints:
    """Vectorized constraints of an uncertainty model across all K bins.

    ``pieces`` returns (K, P) values and complex gradients whose entries must
    all be negative; multi-disk models contribute one piece per disk, the others
    one piece per bin (hulls through the conservative smooth minimum).  With
    ``squared=True`` disk pieces use the squared form, which is smooth at Q = 0.
    """

    def __init__(self, model, config: ConstraintConfig):
        self.kind = model.kind
        self.config = config
        K = len(model.bins)
        if config.g_hat.size != K:
            raise ConfigurationError(
                f"internal model has {config.g_hat.size} bins, model has {K}")
        self.g_hat = config.g_hat
        bins = model.bins
        if self.kind == "norm_bounded":
            self.centers = np.array([[m.center] for m in bins])
            self.radii = np.array([[m.radius] for m in bins])
        elif self.kind == "multi_disk":
            D = max(len(m.disks) for m in bins)
            # pad by repeating the last disk; duplicates do not change the max
            self.centers = np.array([[m.disks[min(i, len(m.disks) - 1)].center
                                      for i in range(D)] for m in bins])
            self.radii = np.array([[m.disks[min(i, len(m.disks) - 1)].radius
                                    for i in range(D)] for m in bins])
        elif self.kind == "elliptic":
            self.centers = np.array([m.center for m in bins])
            self.a = np.array([m.a for m in bins])
            self.b = np.array([m.b for m in bins])
            self.theta = np.array([m.theta for m in bins])
        elif self.kind == "convex_hull":
            H = max(m.num_halfspaces for m in bins)
            self.angles = np.zeros((K, H))
            self.offsets = np.zeros((K, H))
            self.mask = np.zeros((K, H), dtype=bool)
            for k, m in enumerate(bins):
                n = m.num_halfspaces
                self.angles[k, :n] = m.angles
                self.offsets[k, :n] = m.offsets
                self.mask[k, :n] = True
        else:
            raise ConfigurationError(self.kind)

    @property
    def num_pieces(self) -> int:
        return self.centers.shape[1] if self.kind in ("norm_bounded", "multi_disk") else 1

    def pieces(self, Q, rho=None, grad=True, squared=False):
        Q = np.asarray(Q, dtype=complex)
        gh = self.g_hat
        if self.kind in ("norm_bounded", "multi_disk"):
            fn = disk_values_squared if squared else disk_values
            return fn(Q[:, None], self.centers, self.radii, gh[:, None], grad,
                      self.config.disk_mode)
        if self.kind == "elliptic":
            out = ellipse_values(Q, self.centers, self.a, self.b, self.theta, gh, grad)
            return (out[0][:, None], out[1][:, None]) if grad else out[:, None]
        psi, dpsi = hull_psi(Q, self.angles, self.offsets, gh, grad=True)
        val, gc = soft_min(psi, dpsi, self.mask, rho or self.config.rho, conservative=True)
        return (val[:, None], gc[:, None]) if grad else val[:, None]

    def exact(self, Q, grad=False):
        """Exact per-bin constraint values (K,)."""
        Q = np.asarray(Q, dtype=complex)
        if self.kind == "convex_hull":
            psi, dpsi = hull_psi(Q, self.angles, self.offsets, self.g_hat, grad=True)
            val, gc = hard_min(psi, dpsi, self.mask)
        else:
            val, gc = self.pieces(Q, grad=True)
            j = np.argmax(val, axis=1)[:, None]
            val = np.take_along_axis(val, j, 1)[:, 0]
            gc = np.take_along_axis(gc, j, 1)[:, 0]
        return (val, gc) if grad else val

    def smoothed(self, Q, rho=None, grad=False):
        """Per-bin constraint with the hull minimum replaced by the plain log-sum-exp form."""
        if self.kind != "convex_hull":
            return self.exact(Q, grad)
        psi, dpsi = hull_psi(Q, self.angles, self.offsets, self.g_hat, grad=True)
        val, gc = soft_min(psi, dpsi, self.mask, rho or self.config.rho)
        return (val, gc) if grad else val


def chain_to_taps(grad_c: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Map complex per-bin gradients (K,) or (K, P) onto tap gradients."""
    return (np.conj(grad_c).T @ Z).real.T if grad_c.ndim > 1 else (np.conj(grad_c) @ Z).real


def constraint_gradient(kind: str, w, k: int, model, config: ConstraintConfig,
                        rho: float | None = None) -> np.ndarray:
    """Tap gradient of the bin-``k`` constraint; hulls use the smoothed minimum."""
    if kind != model.kind:
        raise ConfigurationError(f"kind {kind!r} does not match model kind {model.kind!r}")
    w = np.asarray(w, dtype=float)
    z = dft_matrix(model.grid.bins[k:k + 1], w.size)[0]
    Q = z @ w
    m = model.bins[k]
    gh = config.g_hat[k]
    if kind == "convex_hull":
        _, gc = constraint_hull(Q, m, gh, rho or config.rho, grad=True)
    elif kind == "elliptic":
        _, gc = constraint_ellipse(Q, m, gh, grad=True)
    elif kind == "multi_disk":
        _, gc = constraint_multi_disk(Q, m, gh, config.disk_mode, grad=True)
    else:
        _, gc = constraint_disk(Q, m, gh, config.disk_mode, grad=True)
    return (np.conj(gc) * z).real


# -- geometric oracle --------------------------------------------------------

@dataclass(frozen=True)
class OracleResult:
    excluded: bool
    margin: float


def boundary_samples(bin_model, samples: int = 4096) -> list:
    """Closed boundary polylines of a bin model (one per convex piece)."""
    t = 2 * np.pi * np.arange(samples) / samples
    if isinstance(bin_model, Disk):
        return [bin_model.center + bin_model.radius * np.exp(1j * t)]
    if isinstance(bin_model, MultiDisk):
        return [d.center + d.radius * np.exp(1j * t) for d in bin_model.disks]
    if isinstance(bin_model, Ellipse):
        e = bin_model
        return [e.center + np.exp(1j * e.theta) * (e.a * np.cos(t) + 1j * e.b * np.sin(t))]
    if isinstance(bin_model, ConvexHull2D):
        v = bin_model.vertices
        edges = np.roll(v, -1) - v
        lengths = np.abs(edges)
        counts = np.maximum(1, np.round(samples * lengths / lengths.sum()).astype(int))
        pts = [v[i] + edges[i] * np.arange(c) / c for i, c in enumerate(counts)]
        return [np.concatenate(pts)]
    raise TypeError(type(bin_model).__name__)


def _winding(z: np.ndarray) -> int:
    if np.any(z == 0):
        return 1
    turns = np.angle(np.roll(z, -1) / z)
    return int(np.rint(np.sum(turns) / (2 * np.pi)))


def exclusion_oracle(Q, bin_model, g_hat, samples: int = 4096) -> OracleResult:
    """Test -1 against the sampled open-loop set without the constraint algebra.

    Boundary samples G are mapped to 1 + Q (G - G_hat); -1 is excluded iff 0 is
    not enclosed by any mapped boundary.  ``margin`` is the smallest |1 + Q (G - G_hat)|
    over the union boundary.
    """
    if samples < 256:
        raise ConfigurationError("the oracle needs at least 256 boundary samples")
    Q = complex(Q)
    curves = [1.0 + Q * (c - g_hat) for c in boundary_samples(bin_model, samples)]
    inside = any(_winding(z) != 0 for z in curves)
    if isinstance(bin_model, MultiDisk) and len(curves) > 1:
        # only arcs not covered by another member bound the union
        keep = []
        for i, (pts, d) in enumerate(zip(boundary_samples(bin_model, samples),
                                         bin_model.disks)):
            covered = np.zeros(pts.shape, dtype=bool)
            for j, other in enumerate(bin_model.disks):
                if j != i:
                    covered |= np.abs(pts - other.center) < other.radius * (1 - 1e-12)
            keep.append(curves[i][~covered])
        margin = float(min(np.min(np.abs(z)) for z in keep if z.size))
    else:
        margin = float(min(np.min(np.abs(z)) for z in curves))
    return OracleResult(excluded=not inside, margin=margin)
