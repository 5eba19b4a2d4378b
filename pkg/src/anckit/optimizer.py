"""Robust FIR-Q controller synthesis by a log-barrier interior-point method.

Minimizes the weighted nominal sensitivity

    L(w) = (1/K) sum_k |W_k (1 - G_hat_k Q_k(w))|^2

subject to the per-bin robust-stability constraints of an uncertainty model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg, optimize

from anckit.constraints import Q_ZERO, BinConstraints, ConstraintConfig
from anckit.errors import ConfigurationError, NestingError
from anckit.sigproc import FrequencyGrid, dft_matrix, evaluate_coefficients

log = logging.getLogger(__name__)

NON_CONVEX_KINDS = ("elliptic", "convex_hull")


@dataclass
class SolverSettings:
    max_outer: int = 12
    max_inner: int = 80
    mu_factor: float = 10.0
    gap_tol_rel: float = 1e-7
    kkt_tol: float = 1e-3
    tap_penalty: float = 1e-6  # ridge weight on ||w||^2, relative to the loss at w = 0
    rho_growth: float = 3.0
    rho_max: float = 1e4
    seed: int = 0


@dataclass
class DesignSpec:
    grid: FrequencyGrid
    g_hat: np.ndarray
    weight: np.ndarray
    model: object
    num_taps: int = 256
    constraint: ConstraintConfig | None = None
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        self.g_hat = np.asarray(self.g_hat, dtype=float).ravel()
        self.weight = np.asarray(getattr(self.weight, "magnitudes", self.weight),
                                 dtype=float).ravel()
        if self.g_hat.size < 2 or self.g_hat[0] != 0.0:
            raise ConfigurationError(
                "internal model must start with a pure delay (leading coefficient 0)")
        if self.weight.size != self.grid.num_bins:
            raise ConfigurationError("weight and grid sizes differ")
        if self.model.grid != self.grid:
            raise ConfigurationError("uncertainty model was fitted on a different grid")
        if self.num_taps < 1:
            raise ConfigurationError("num_taps must be >= 1")
        g_hat_k = evaluate_coefficients(self.g_hat, self.grid.bins)
        if self.constraint is None:
            self.constraint = ConstraintConfig(g_hat_k)
        elif self.constraint.g_hat.size != self.grid.num_bins:
            raise ConfigurationError("constraint internal model has the wrong size")

    @property
    def g_hat_response(self) -> np.ndarray:
        return self.constraint.g_hat

    def with_model(self, model) -> "DesignSpec":
        return DesignSpec(self.grid, self.g_hat, self.weight, model, self.num_taps,
                          self.constraint, self.solver)


@dataclass
class ControllerDesign:
    q: np.ndarray
    g_hat: np.ndarray
    grid: FrequencyGrid
    weight: np.ndarray
    loss: float
    model_kind: str = ""
    constraint_values: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def num_taps(self) -> int:
        return self.q.size

    def q_response(self, grid: FrequencyGrid | None = None) -> np.ndarray:
        return evaluate_coefficients(self.q, (grid or self.grid).bins)

    def g_hat_response(self, grid: FrequencyGrid | None = None) -> np.ndarray:
        return evaluate_coefficients(self.g_hat, (grid or self.grid).bins)


@dataclass
class OptimizationResult:
    design: ControllerDesign
    status: str  # converged | max-iter | infeasible
    iterations: int
    kkt_residual: float
    complementarity: float
    trace: list = field(default_factory=list)
    infeasible_bins: list = field(default_factory=list)


class _Problem:
    """Cached matrices for loss and constraint evaluation on one spec."""

    def __init__(self, spec: DesignSpec):
        self.spec = spec
        K, N = spec.grid.num_bins, spec.num_taps
        self.K, self.N = K, N
        Z = dft_matrix(spec.grid.bins, N)
        self.Z = Z
        self.R = np.ascontiguousarray(Z.real)
        self.I = np.ascontiguousarray(Z.imag)
        self.W = spec.weight
        self.wg = spec.weight * spec.g_hat_response
        B = self.wg[:, None] * Z
        self.L_zero = float(np.mean(np.abs(self.W) ** 2))
        self.ridge = spec.solver.tap_penalty * self.L_zero
        self.sqrt_loss = np.vstack([math.sqrt(2.0 / K) * B.real, math.sqrt(2.0 / K) * B.imag,
                                    math.sqrt(2.0 * self.ridge) * np.eye(N)])
        self.cons = BinConstraints(spec.model, spec.constraint)

    def Q(self, w):
        return self.Z @ w

    def loss(self, w, Q=None):
        Q = self.Q(w) if Q is None else Q
        r = self.W - self.wg * Q
        L = float(np.mean(np.abs(r) ** 2))
        grad = -(2.0 / self.K) * (np.conj(r) * self.wg @ self.Z).real
        return L, grad

    def objective(self, w, Q=None):
        """Loss plus the small ridge term the solver actually minimizes."""
        L, grad = self.loss(w, Q)
        return L + self.ridge * float(w @ w), grad + 2.0 * self.ridge * w, L

    def taps(self, gc):
        return (np.conj(gc) @ self.Z).real

    def pieces_sq(self, Q, rho=None, grad=True):
        return self.cons.pieces(Q, rho, grad, squared=True)

    def exact(self, Q):
        g = self.cons.exact(Q)
        if self.cons.kind in NON_CONVEX_KINDS:
            g = np.where(np.abs(Q) < Q_ZERO, -self.spec.constraint.eps_feas, g)
        return g


def loss_and_gradient(w, spec: DesignSpec):
    """Weighted nominal sensitivity loss and its tap gradient."""
    w = np.asarray(w, dtype=float)
    if w.size != spec.num_taps:
        raise ConfigurationError(f"expected {spec.num_taps} taps, got {w.size}")
    Z = dft_matrix(spec.grid.bins, w.size)
    wg = spec.weight * spec.g_hat_response
    r = spec.weight - wg * (Z @ w)
    L = float(np.mean(np.abs(r) ** 2))
    grad = -(2.0 / spec.grid.num_bins) * (np.conj(r) * wg @ Z).real
    return L, grad


class _Barrier:
    def __init__(self, prob: _Problem):
        self.p = prob

    def pieces(self, Q, rho, grad=True):
        return self.p.cons.pieces(Q, rho, grad, squared=True)

    def value(self, w, mu, rho):
        Q = self.p.Q(w)
        u = self.pieces(Q, rho, grad=False)
        if not np.all(u < 0) or not np.all(np.isfinite(u)):
            return math.inf
        J, _, _ = self.p.objective(w, Q)
        return J - mu * float(np.sum(np.log(-u)))

    def derivatives(self, w, mu, rho):
        p = self.p
        Q = p.Q(w)
        J, gL, L = p.objective(w, Q)
        u, gc = self.pieces(Q, rho)
        inv = 1.0 / (-u)
        phi = J - mu * float(np.sum(np.log(-u)))
        grad = gL + p.taps(mu * np.sum(gc * inv, axis=1))
        # per-bin 2x2 curvature: gradient outer products plus finite-difference Hessians
        gx, gy = gc.real, gc.imag
        outer = np.empty(u.shape + (2, 2))
        outer[..., 0, 0] = gx * gx
        outer[..., 0, 1] = outer[..., 1, 0] = gx * gy
        outer[..., 1, 1] = gy * gy
        h = 1e-7 * np.maximum(np.abs(Q), 1e-3)
        _, gpx = self.pieces(Q + h, rho)
        _, gmx = self.pieces(Q - h, rho)
        _, gpy = self.pieces(Q + 1j * h, rho)
        _, gmy = self.pieces(Q - 1j * h, rho)
        dx = (gpx - gmx) / (2 * h[:, None])
        dy = (gpy - gmy) / (2 * h[:, None])
        curv = np.empty(u.shape + (2, 2))
        curv[..., 0, 0] = dx.real
        curv[..., 1, 1] = dy.imag
        curv[..., 0, 1] = curv[..., 1, 0] = 0.5 * (dx.imag + dy.real)
        blocks = mu * (outer * (inv ** 2)[..., None, None] + curv * inv[..., None, None])
        # square-root factor of the PSD part of each bin's 2x2 curvature block
        vals, vecs = np.linalg.eigh(np.sum(blocks, axis=1))
        S = np.sqrt(np.maximum(vals, 0.0))[:, :, None] * np.swapaxes(vecs, 1, 2)
        R, I = p.R, p.I
        A = np.vstack([p.sqrt_loss,
                       S[:, 0, 0, None] * R + S[:, 0, 1, None] * I,
                       S[:, 1, 0, None] * R + S[:, 1, 1, None] * I])
        return phi, grad, A, L, u, gc, gL


def _newton_direction(A, grad):
    """Solve (A^T A) s = -grad through a QR factor of A, never forming A^T A."""
    n = A.shape[1]
    r = linalg.qr(A, mode="r", check_finite=False)[0][:n]
    diag = np.abs(np.diag(r))
    floor = 1e-10 * max(float(diag.max()), 1e-300)
    if diag.min() <= floor:
        r = linalg.qr(np.vstack([r, floor * np.eye(n)]), mode="r", check_finite=False)[0][:n]
    y = linalg.solve_triangular(r, -grad, trans="T", check_finite=False)
    return linalg.solve_triangular(r, y, check_finite=False)


def _feasible_scale(prob: _Problem, w, rho, floor=1e-6):
    """Largest t in a geometric backoff with all barrier pieces negative at t*w."""
    t = 1.0
    while t > floor:
        u = prob.pieces_sq(prob.Q(t * w), rho, grad=False)
        if np.all(u < 0) and np.all(np.isfinite(u)):
            return t
        t *= 0.9
    return None


def _stationarity(prob, w, mu, rho, g_ref):
    """KKT residuals at ``w``.

    Multipliers are refitted by non-negative least squares on the pieces the
    barrier treats as active, so the stationarity residual does not depend on
    how tightly the last barrier subproblem was centred.  Returns the relative
    stationarity residual and the largest complementary-slackness product.
    """
    Q = prob.Q(w)
    _, gL, _ = prob.objective(w, Q)
    u, gc = prob.pieces_sq(Q, rho)
    lam = mu / (-u)
    active = np.argwhere(lam >= 1e-6 * lam.max())
    J = (np.conj(gc[active[:, 0], active[:, 1]])[:, None] * prob.Z[active[:, 0]]).real.T
    x, res = optimize.nnls(J, -gL, maxiter=20 * J.shape[1] + 100)
    scale = max(float(np.linalg.norm(gL)), g_ref, 1e-300)
    comp = float(np.max(x * -u[active[:, 0], active[:, 1]], initial=0.0))
    return float(res / scale), comp


def solve(spec: DesignSpec, w0=None, on_trace: Callable[[dict], None] | None = None,
          loss_ref: float | None = None) -> OptimizationResult:
    """Barrier method from a strictly feasible start ``w0`` (zeros by default)."""
    settings = spec.solver
    prob = _Problem(spec)
    barrier = _Barrier(prob)
    w = np.zeros(spec.num_taps) if w0 is None else np.array(w0, dtype=float)
    if w.size != spec.num_taps:
        raise ConfigurationError(f"warm start has {w.size} taps, expected {spec.num_taps}")
    rho = spec.constraint.rho
    u0 = prob.pieces_sq(prob.Q(w), rho, grad=False)
    L0, _ = prob.loss(w)
    if not np.all(u0 < 0):
        bad = sorted(set(np.nonzero(~(u0 < 0))[0].tolist()))
        log.error("start point violates constraints at %d bins", len(bad))
        design = _make_design(spec, prob, w, L0, {"status": "infeasible"})
        return OptimizationResult(design, "infeasible", 0, math.nan, math.nan,
                                  infeasible_bins=bad)
    L_ref = loss_ref if loss_ref is not None else prob.loss(np.zeros(spec.num_taps))[0]
    gap_tol = settings.gap_tol_rel * max(L_ref, 1e-300)
    n_pieces = u0.size

    # initial barrier weight: duality-gap estimate at a tenth of the starting loss
    mu = max(0.1 * L0, gap_tol) / n_pieces
    g_ref = prob.loss(np.zeros(spec.num_taps))[1]

    J0 = prob.objective(w)[0]
    best_w, best_J = w.copy(), J0
    trace = []
    iterations = 0
    status = "max-iter"
    polish = False
    for outer in range(settings.max_outer + 1):
        # the last pass re-centres tightly at the final mu so the KKT report is meaningful
        inner_tol = 1e-3 * mu * 1e-6 if polish else 1e-3 * mu
        for _ in range(settings.max_inner):
            phi, grad, H, L, u, _, _ = barrier.derivatives(w, mu, rho)
            step = _newton_direction(H, grad)
            decrement = -float(grad @ step)
            if decrement < 0:
                step, decrement = -grad, float(grad @ grad)
            if 0.5 * decrement <= inner_tol:
                break
            t = 1.0
            while t > 1e-12:
                trial = barrier.value(w + t * step, mu, rho)
                if trial <= phi - 0.25 * t * decrement:
                    break
                t *= 0.5
            else:
                log.debug("line search stalled at mu=%g", mu)
                break
            if polish and t < 1e-6:
                break
            w = w + t * step
            iterations += 1
            # flat out-of-band directions make the decrement unreliable; stop once
            # the barrier objective itself no longer moves
            stalled = t == 1.0 and phi - trial <= (inner_tol if polish else 1e-3 * n_pieces * mu)
            Q = prob.Q(w)
            J, _, L = prob.objective(w, Q)
            gmax = float(np.max(prob.exact(Q)))
            rec = {"iteration": iterations, "mu": mu, "loss": L, "max_constraint": gmax,
                   "step": t, "rho": rho}
            trace.append(rec)
            if on_trace:
                on_trace(rec)
            if gmax < 0 and J < best_J:
                best_w, best_J = w.copy(), J
            if stalled:
                break
        if polish:
            break
        if n_pieces * mu <= gap_tol * (1 + 1e-9):
            status = "converged"
            polish = True
            continue
        if outer == settings.max_outer - 1:
            polish = True
            continue
        mu /= settings.mu_factor
        if spec.model.kind == "convex_hull":
            rho = min(rho * settings.rho_growth, settings.rho_max)

    kkt, comp = _stationarity(prob, w, mu, rho, float(np.linalg.norm(g_ref)))
    if status == "converged" and kkt > settings.kkt_tol:
        status = "max-iter"
    w_out = best_w
    final_L = prob.loss(w_out)[0]
    if final_L > L0:
        # the ridge can trade a sliver of loss for a smaller norm; never return worse than the start
        w_out, final_L = np.array(w0 if w0 is not None else np.zeros(spec.num_taps), float), L0
    design = _make_design(spec, prob, w_out, final_L,
                          {"status": status, "iterations": iterations, "seed": settings.seed,
                           "final_loss": final_L, "kkt_residual": kkt,
                           "complementarity": comp, "final_mu": mu, "final_rho": rho})
    if np.max(design.constraint_values) >= spec.constraint.eps_feas:
        status = "infeasible"
    return OptimizationResult(design, status, iterations, kkt, comp, trace)


def _make_design(spec, prob, w, L, provenance):
    Q = prob.Q(w)
    return ControllerDesign(q=np.array(w), g_hat=spec.g_hat.copy(), grid=spec.grid,
                            weight=spec.weight.copy(), loss=float(L),
                            model_kind=spec.model.kind, constraint_values=prob.exact(Q),
                            provenance=dict(provenance, model_kind=spec.model.kind))


def warm_start_ladder(spec: DesignSpec, nominal_model, on_trace=None,
                      nominal: OptimizationResult | None = None) -> OptimizationResult:
    """Solve the norm-bounded problem, then the target problem from its optimum.

    The norm-bounded optimum is shrunk (w -> t w) until the target's smoothed
    barrier is strictly feasible.  For convex hulls the exact constraint must
    already hold there because the hull lies inside the smallest circle.
    """
    if nominal_model.kind != "norm_bounded":
        raise ConfigurationError("ladder needs a norm-bounded model as first rung")
    if nominal is None:
        nominal = solve(spec.with_model(nominal_model), on_trace=on_trace)
    if nominal.status == "infeasible":
        return nominal
    target = spec.model
    if target.kind == "norm_bounded":
        return nominal
    w_nb = nominal.design.q
    prob = _Problem(spec)
    exact = prob.exact(prob.Q(w_nb))
    if np.any(exact >= 0):
        bad = np.nonzero(exact >= 0)[0].tolist()
        if target.kind == "convex_hull":
            raise NestingError(
                f"norm-bounded optimum violates the hull constraint at bins {bad[:10]}; "
                "the hull should lie inside the smallest circle")
        log.info("norm-bounded optimum not feasible for %s at %d bins; shrinking",
                 target.kind, len(bad))
    t = _feasible_scale(prob, w_nb, spec.constraint.rho)
    if t is None:
        log.warning("no strictly feasible scaling of the norm-bounded optimum")
        design = _make_design(spec, prob, w_nb, prob.loss(w_nb)[0], {"status": "infeasible"})
        return OptimizationResult(design, "infeasible", 0, math.nan, math.nan,
                                  infeasible_bins=np.nonzero(exact >= 0)[0].tolist())
    res = solve(spec, w0=t * w_nb, on_trace=on_trace)
    if np.all(exact < 0) and nominal.design.loss < res.design.loss:
        # the norm-bounded optimum is itself feasible for the target and better
        res.design = _make_design(spec, prob, w_nb, nominal.design.loss,
                                  dict(res.design.provenance, kept_warm_start=True))
    res.design.provenance.update(warm_start="norm_bounded", warm_start_scale=t,
                                 warm_start_loss=nominal.design.loss,
                                 nominal_iterations=nominal.iterations)
    res.iterations += nominal.iterations
    return res
