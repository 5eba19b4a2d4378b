"""Acceptance criteria; each test carries a ``criterion`` label reported at the end of the run."""

import itertools
import json
import math
import time

import numpy as np
import pytest

from anckit import analysis, constraints, geometry
from anckit.constraints import ConstraintConfig, constraint_gradient, constraint_value
from anckit.geometry import Disk, Ellipse
from anckit.optimizer import DesignSpec, SolverSettings, loss_and_gradient, solve
from anckit.sigproc import (FrequencyGrid, nominal_sensitivity_full_circle,
                            waterbed_functional)
from anckit.uncertainty import UncertaintyModel

KINDS = ("norm_bounded", "multi_disk", "elliptic", "convex_hull")


def criterion(label):
    def mark(fn):
        fn.criterion = label
        return fn
    return mark


def brute_force_circle(pts):
    """Smallest enclosing circle by trying every pair and triple."""
    best = None
    scale = max(1.0, float(np.max(np.abs(pts))))
    candidates = []
    for p, q in itertools.combinations(pts, 2):
        candidates.append(((p + q) / 2, abs(p - q) / 2))
    for p, q, s in itertools.combinations(pts, 3):
        b, c = q - p, s - p
        d = 2 * (b.real * c.imag - b.imag * c.real)
        if abs(d) < 1e-14:
            continue
        ux = (c.imag * abs(b) ** 2 - b.imag * abs(c) ** 2) / d
        uy = (b.real * abs(c) ** 2 - c.real * abs(b) ** 2) / d
        center = p + complex(ux, uy)
        candidates.append((center, abs(p - center)))
    for center, r in candidates:
        if np.all(np.abs(pts - center) <= r + 1e-12 * scale):
            if best is None or r < best[1]:
                best = (center, r)
    return best


@criterion("1 geometry oracle suite")
def test_geometry_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    for _ in range(500):
        n = int(rng.integers(2, 13))
        pts = rng.normal(size=n) + 1j * rng.normal(size=n)
        disk = geometry.smallest_circle(pts)
        _, r = brute_force_circle(pts)
        assert abs(disk.radius - r) < 1e-9
    for _ in range(200):
        n = int(rng.integers(3, 30))
        pts = (rng.normal(size=n) * rng.uniform(0.2, 3) + 1j * rng.normal(size=n)) \
            * np.exp(1j * rng.uniform(0, np.pi))
        e = geometry.min_area_ellipse(pts)
        assert np.all(geometry.contains(e, pts, tol=1e-9 * geometry.spread(pts)))
        shrunk = Ellipse(e.center, e.a * (1 - 1e-4), e.b * (1 - 1e-4), e.theta)
        assert not np.all(geometry.contains(shrunk, pts))
        hull = geometry.convex_hull(pts)
        assert np.all(geometry.contains(hull, pts, tol=1e-9 * geometry.spread(pts)))
    assert time.perf_counter() - t0 < 30


def _random_bin_model(kind, rng):
    n = int(rng.integers(3, 12))
    center = complex(rng.normal(), rng.normal())
    pts = center + rng.uniform(0.05, 1.0) * (rng.normal(size=n) * rng.uniform(0.3, 2)
                                             + 1j * rng.normal(size=n))
    if kind == "norm_bounded":
        return geometry.smallest_circle(pts)
    if kind == "multi_disk":
        return geometry.fit_multi_disk(pts, int(rng.integers(1, 5)))
    if kind == "elliptic":
        return geometry.min_area_ellipse(pts)
    return geometry.convex_hull(pts)


@criterion("2 constraint-oracle sign equivalence")
@pytest.mark.parametrize("kind", KINDS)
def test_sign_equivalence(kind):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    checked = 0
    for _ in range(1000):
        m = _random_bin_model(kind, rng)
        g_hat = complex(rng.normal(), rng.normal())
        Q = complex(rng.normal(), rng.normal()) * 10 ** rng.uniform(-1.5, 1)
        g = float(constraint_value(Q, m, g_hat))
        if abs(g) <= 1e-9:
            continue
        oracle = constraints.exclusion_oracle(Q, m, g_hat)
        assert (g < 0) == oracle.excluded, (kind, Q, g_hat, m)
        checked += 1
    assert checked >= 990
    assert time.perf_counter() - t0 < 60


def _small_problem(kind, rng, K=24, N=12):
    grid = FrequencyGrid(48000.0, np.sort(rng.uniform(0.05, 3.0, K)))
    g_hat = np.r_[0.0, rng.normal(size=6) * 0.3]
    cfg = ConstraintConfig(np.exp(-1j * np.outer(grid.bins, np.arange(g_hat.size))) @ g_hat)
    bins = [_random_bin_model(kind, rng) for _ in range(K)]
    return grid, g_hat, cfg, UncertaintyModel(kind, grid, bins), N


@criterion("3 gradient checks")
@pytest.mark.parametrize("kind", KINDS)
def test_gradients(kind):
    rng = np.random.default_rng(3)
    grid, g_hat, cfg, model, N = _small_problem(kind, rng)
    Z = np.exp(-1j * np.outer(grid.bins, np.arange(N)))
    worst = 0.0
    for _ in range(100):
        w = rng.normal(size=N) * 0.2
        k = int(rng.integers(grid.num_bins))

        def f(v):
            return float(constraint_value(Z[k] @ v, model.bins[k], cfg.g_hat[k],
                                          rho=cfg.rho if kind == "convex_hull" else None,
                                          mode=cfg.disk_mode))

        grad = constraint_gradient(kind, w, k, model, cfg)
        h = 1e-6
        fd = np.array([(f(w + h * e) - f(w - h * e)) / (2 * h) for e in np.eye(N)])
        worst = max(worst, np.linalg.norm(fd - grad) / max(np.linalg.norm(grad), 1e-12))
    assert worst < 1e-5


@criterion("3 gradient checks")
def test_loss_gradient():
    rng = np.random.default_rng(4)
    grid, g_hat, cfg, model, N = _small_problem("norm_bounded", rng)
    spec = DesignSpec(grid, g_hat, rng.uniform(0.5, 3, grid.num_bins), model, N, cfg)
    worst = 0.0
    for _ in range(100):
        w = rng.normal(size=N)
        _, grad = loss_and_gradient(w, spec)
        h = 1e-4
        fd = np.array([(loss_and_gradient(w + h * e, spec)[0]
                        - loss_and_gradient(w - h * e, spec)[0]) / (2 * h) for e in np.eye(N)])
        worst = max(worst, np.linalg.norm(fd - grad) / np.linalg.norm(grad))
    assert worst < 1e-8


@criterion("4 analytic toy optima")
@pytest.mark.parametrize("radius, q_star, loss_star", [(0.5, 1.0, 0.0), (2.0, 0.5, 0.25)])
def test_toy_optima(radius, q_star, loss_star):
    res = solve(_toy_spec(radius, SolverSettings(tap_penalty=0.0)))
    assert abs(res.design.q[0] - q_star) < 1e-6
    assert abs(res.design.loss - loss_star) < 1e-6


@criterion("4 analytic toy optima")
def test_toy_with_default_ridge():
    # |1 - Q|^2 + lam Q^2 with lam = tap_penalty * L(0) = tap_penalty is minimised at 1 / (1 + lam).
    lam = SolverSettings().tap_penalty
    res = solve(_toy_spec(0.5, SolverSettings()))
    assert abs(res.design.q[0] - 1 / (1 + lam)) < 1e-7


def _toy_spec(radius, solver):
    grid = FrequencyGrid(48000.0, np.array([0.3]))
    model = UncertaintyModel("norm_bounded", grid, [Disk(1.0, radius)])
    return DesignSpec(grid, [0.0, 1.0], [1.0], model, num_taps=1,
                      constraint=ConstraintConfig(np.array([1.0])), solver=solver)


@criterion("5 model-refinement ordering")
def test_refinement_ordering(desk):
    L = {k: r.design.loss for k, r in desk.results.items()}
    print("losses", L, "timings", desk.timings)
    for r in desk.results.values():
        assert r.status != "infeasible"
    assert L["convex_hull"] <= L["elliptic"] + 1e-6
    assert L["convex_hull"] <= 0.95 * L["norm_bounded"]
    assert desk.timings["total"] < 300


@criterion("6 area ordering")
def test_area_ordering(desk):
    hull = desk.models["convex_hull"].areas()
    ell = desk.models["elliptic"].areas()
    disk = desk.models["norm_bounded"].areas()
    scale = 1e-12 * disk
    assert np.all(hull <= ell + scale)
    assert np.all(ell <= disk + scale)
    assert np.mean(hull / disk) < 1


@criterion("7 robust stability end to end")
def test_robust_stability(desk):
    irs = desk.obs.impulse_responses
    labels = np.array(desk.obs.labels)
    assert {"loose", "tight"} <= set(labels)
    nxt = np.roll(np.arange(irs.shape[0]), -1)
    for kind, res in desk.results.items():
        assert res.status != "infeasible"
        sim = analysis.simulate_closed_loop(res.design, irs)
        assert np.all(sim.stable), (kind, np.nonzero(~sim.stable)[0])
        tr = analysis.fit_transition_test(res.design, irs, irs[nxt])
        assert np.all(tr.stable), (kind, np.nonzero(~tr.stable)[0])


@criterion("7 robust stability end to end")
def test_scaled_controller_fails(desk):
    design = desk.results["convex_hull"].design
    irs = desk.obs.impulse_responses
    bad = type(design)(design.q * 10, design.g_hat, design.grid, design.weight, design.loss)
    Q = bad.q_response()
    Gh = bad.g_hat_response()
    model = desk.models["convex_hull"]
    violated = any(not constraints.exclusion_oracle(Q[k], model.bins[k], Gh[k], 512).excluded
                   for k in range(0, desk.grid.num_bins, 4))
    assert violated
    sim = analysis.simulate_closed_loop(bad, irs)
    assert not np.all(sim.stable)


@criterion("8 waterbed property")
def test_waterbed(desk):
    for res in desk.results.values():
        value = waterbed_functional(nominal_sensitivity_full_circle(res.design.q,
                                                                    res.design.g_hat))
        assert value >= -1e-6


@criterion("9 nominal identity")
def test_nominal_identity(desk):
    for res in desk.results.values():
        d = res.design
        S = analysis.closed_loop_response(d, d.g_hat_response())
        assert np.max(np.abs(S - (1 - d.q_response() * d.g_hat_response()))) <= 1e-14


@criterion("10 determinism")
def test_determinism(tmp_path):
    from anckit.cli import main

    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["generate", "--out", str(d / "obs.json"), "--seed", "7", "-q"]) == 0
        for kind in ("norm_bounded", "convex_hull"):
            assert main(["fit", "--observations", str(d / "obs.json"), "--kind", kind,
                         "--out", str(d / f"{kind}.json"), "-q"]) == 0
        assert main(["design", "--observations", str(d / "obs.json"),
                     "--model", str(d / "convex_hull.json"),
                     "--nominal-model", str(d / "norm_bounded.json"),
                     "--out", str(d / "controller.json"), "-q"]) == 0
        outputs.append((d / "controller.json").read_bytes())
    assert outputs[0] == outputs[1]
    assert json.loads(outputs[0])["model_kind"] == "convex_hull"
    assert math.isfinite(json.loads(outputs[0])["loss"])
