"""Closed-loop evaluation, stability verification and report emission."""

from __future__ import annotations

import csv
import logging
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from anckit.constraints import exclusion_oracle
from anckit.errors import ConfigurationError
from anckit.sigproc import (FrequencyGrid,
                            nominal_sensitivity_full_circle, octave_smooth, to_db,
                            waterbed_functional)

log = logging.getLogger(__name__)

BOUNDARY_TOL = 1e-12
TAIL_RATIO = 1e-10
HORIZON_FACTOR = 8  # shortest accepted horizon, in units of max(N, plant length)
DEFAULT_HORIZON_FACTOR = 48  # robust designs ring; 8x often stops before the decay is visible
OVERFLOW = 1e150


def closed_loop_response(design, G, return_flags: bool = False):
    """Sensitivity S = (1 - G_hat Q) / (1 + Q (G - G_hat)) for one or more plants.

    ``G`` is (K,) or (M, K) on the design grid.  Bins whose denominator is
    below 1e-12 in magnitude sit on the stability boundary; they are logged and
    returned as a boolean mask when ``return_flags`` is set.
    """
    G = np.asarray(G, dtype=complex)
    K = design.grid.num_bins
    if G.shape[-1] != K:
        raise ConfigurationError(f"plant has {G.shape[-1]} bins, design grid has {K}")
    Q = design.q_response()
    Gh = design.g_hat_response()
    den = 1.0 + Q * (G - Gh)
    flags = np.abs(den) < BOUNDARY_TOL
    if np.any(flags):
        log.warning("%d bins lie on the stability boundary", int(flags.sum()))
    with np.errstate(divide="ignore", invalid="ignore"):
        S = (1.0 - Gh * Q) / den
    return (S, flags) if return_flags else S


@dataclass
class SimulationResult:
    error: np.ndarray  # (M, T)
    stable: np.ndarray  # (M,)
    tail_ratio: np.ndarray  # (M,)
    overflow_index: np.ndarray  # (M,), -1 when finite throughout


def minimum_horizon(num_taps: int, plant_length: int) -> int:
    return HORIZON_FACTOR * max(num_taps, plant_length)


def default_horizon(num_taps: int, plant_length: int) -> int:
    return DEFAULT_HORIZON_FACTOR * max(num_taps, plant_length)


def _verdict(e: np.ndarray, overflow: np.ndarray, tail_start: int | None = None):
    T = e.shape[1]
    n = max(1, T // 10)
    head = np.sum(e[:, :n] ** 2, axis=1)
    tail = np.sum(e[:, (tail_start if tail_start is not None else T - n):] ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(head > 0, tail / head, np.where(tail > 0, np.inf, 0.0))
    stable = (ratio < TAIL_RATIO) & (overflow < 0)
    return stable, ratio


def _loop_denominator(q, g_hat, g):
    """P = delta + q * (g - g_hat), so that the loop input is u = (q / P) d."""
    L = max(g.size, g_hat.size)
    diff = np.zeros(L)
    diff[:g.size] += g
    diff[:g_hat.size] -= g_hat
    P = np.convolve(q, diff)
    P[0] += 1.0
    return P


def _first_overflow(x):
    bad = ~(np.abs(x) < OVERFLOW)
    return np.where(bad.any(axis=1), np.argmax(bad, axis=1), -1)


def _run_loop(q, g_hat, plants, d, fade=None):
    """IMC loop u(n) = q * [e + g_hat * u](n), e(n) = d(n) - (g * u)(n), batched over plants.

    While the plant is fixed the loop is the rational filter u = (q / P) d with
    the FIR denominator ``P = delta + q * (g - g_hat)``, run by ``lfilter``.
    With ``fade=(alpha, plants_b)`` the plant at time n is
    (1 - alpha[n]) plants + alpha[n] plants_b for a non-decreasing ``alpha``;
    the samples where it moves are run by the explicit per-sample recursion
    and the filter state is handed over to ``lfilter`` once the plant settles.
    """
    M, T = d.shape
    L, Lq, Lh = plants.shape[1], q.size, g_hat.size
    if fade is None:
        n1 = n2 = T
        plants_b = plants
    else:
        alpha, plants_b = fade
        moving = np.nonzero(alpha > 0)[0]
        n1 = int(moving[0]) if moving.size else T
        below = np.nonzero(alpha < 1)[0]
        settled = int(below[-1]) + 1 if below.size else 0
        # the fixed-plant recursion for plants_b holds once q's window sees only settled samples
        n2 = min(T, max(n1, settled) + Lq + L)
    pad = max(L, Lq, Lh)
    Up = np.zeros((M, pad + T))
    Vp = np.zeros((M, pad + T))
    U, V = Up[:, pad:], Vp[:, pad:]
    E = np.empty((M, T))
    overflow = np.full(M, -1)
    with np.errstate(all="ignore"):
        for m in range(M):
            U[m, :n1] = signal.lfilter(q, _loop_denominator(q, g_hat, plants[m]), d[m, :n1])
        ov = _first_overflow(U[:, :n1])
        for m in np.nonzero(ov >= 0)[0]:
            U[m, ov[m]:] = 0.0
        overflow = ov
        Y = signal.fftconvolve(U[:, :n1], plants, axes=1)[:, :n1] if n1 else np.zeros((M, 0))
        E[:, :n1] = d[:, :n1] - Y
        if n1 < T:
            H = signal.fftconvolve(U[:, :n1], g_hat[None, :], axes=1)[:, :n1]
            V[:, :n1] = E[:, :n1] + H
            ga_rev, gb_rev = plants[:, ::-1], plants_b[:, ::-1]
            past = np.ascontiguousarray(np.stack([ga_rev[:, :-1], gb_rev[:, :-1]], axis=2))
            h_past, q_past, q0 = g_hat[1:][::-1], q[1:][::-1], q[0]
            for n in range(n1, n2):
                i = pad + n
                a = alpha[n]
                u_hist = Up[:, i - L + 1:i]
                ya, yb = (u_hist[:, None, :] @ past)[:, 0, :].T
                gpast = (1 - a) * ya + a * yb
                g0 = (1 - a) * ga_rev[:, -1] + a * gb_rev[:, -1]
                hpast = Up[:, i - Lh + 1:i] @ h_past if Lh > 1 else 0.0
                qpast = Vp[:, i - Lq + 1:i] @ q_past if Lq > 1 else 0.0
                rest = d[:, n] - gpast + hpast
                u = (q0 * rest + qpast) / (1.0 + q0 * g0)
                Up[:, i] = u
                Vp[:, i] = rest - g0 * u
                E[:, n] = d[:, n] - g0 * u - gpast
                bad = (overflow < 0) & ~(np.abs(E[:, n]) < OVERFLOW)
                if np.any(bad):
                    overflow[bad] = n
                    Up[bad, i] = Vp[bad, i] = 0.0
            if n2 < T:
                for m in range(M):
                    P = _loop_denominator(q, g_hat, plants_b[m])
                    num, P = q / P[0], P / P[0]  # lfiltic assumes a monic denominator
                    zi = signal.lfiltic(num, P, U[m, :n2][::-1][:P.size - 1],
                                        d[m, :n2][::-1][:Lq - 1])
                    U[m, n2:] = signal.lfilter(num, P, d[m, n2:], zi=zi)[0]
                ov = _first_overflow(U[:, n2:])
                for m in np.nonzero((ov >= 0) & (overflow < 0))[0]:
                    overflow[m] = n2 + ov[m]
                    U[m, n2 + ov[m]:] = 0.0
                Y = signal.fftconvolve(U, plants_b, axes=1)[:, n2:T]
                E[:, n2:] = d[:, n2:] - Y
        ov = _first_overflow(E)
        overflow = np.where(overflow < 0, ov, np.where(ov < 0, overflow, np.minimum(ov, overflow)))
    for m in np.nonzero(overflow >= 0)[0]:
        E[m, overflow[m]:] = np.nan
    return E, overflow


def _excitation(kind, M, T, seed, burst=None):
    d = np.zeros((M, T))
    if kind == "impulse":
        d[:, 0] = 1.0
    elif kind == "noise":
        rng = np.random.default_rng(seed)
        n = T if burst is None else burst
        d[:, :n] = rng.standard_normal((M, n))
    else:
        raise ConfigurationError(f"unknown excitation {kind!r}")
    return d


def simulate_closed_loop(design, plant_impulse_responses, excitation: str = "impulse",
                         horizon: int | None = None, seed: int = 0) -> SimulationResult:
    """Time-domain IMC loop for each plant impulse response.

    Stable iff the last 10 % of the error energy is below 1e-10 times the
    first 10 %.  Noise excitation is a burst over the first tenth of the
    horizon so that the tail measures the free decay.
    """
    plants = np.atleast_2d(np.asarray(plant_impulse_responses, dtype=float))
    M, L = plants.shape
    T = horizon or default_horizon(design.q.size, L)
    if T < minimum_horizon(design.q.size, L):
        raise ConfigurationError(
            f"horizon {T} shorter than {minimum_horizon(design.q.size, L)} samples")
    burst = max(1, T // 10) if excitation == "noise" else None
    d = _excitation(excitation, M, T, seed, burst)
    E, overflow = _run_loop(np.asarray(design.q, float), np.asarray(design.g_hat, float),
                            plants, d)
    stable, ratio = _verdict(np.nan_to_num(E, nan=0.0), overflow)
    return SimulationResult(E, stable, ratio, overflow)


def fit_transition_test(design, ir_from, ir_to, horizon: int | None = None,
                        seed: int = 0) -> SimulationResult:
    """Cross-fade the plant from ``ir_from`` to ``ir_to`` over the middle third.

    A noise burst drives the loop for the first two thirds of the horizon; the
    remaining third must decay by the usual tail criterion.  Either argument
    may be (L,) or (M, L) for a batch of transitions.
    """
    a = np.atleast_2d(np.asarray(ir_from, dtype=float))
    b = np.atleast_2d(np.asarray(ir_to, dtype=float))
    L = max(a.shape[1], b.shape[1])
    a = np.pad(a, ((0, 0), (0, L - a.shape[1])))
    b = np.pad(b, ((0, 0), (0, L - b.shape[1])))
    a, b = np.broadcast_arrays(a, b)
    a, b = np.ascontiguousarray(a), np.ascontiguousarray(b)
    T = horizon or 3 * default_horizon(design.q.size, L)
    if T < 3 * minimum_horizon(design.q.size, L):
        raise ConfigurationError(
            f"horizon {T} shorter than {3 * minimum_horizon(design.q.size, L)} samples")
    third = T // 3
    alpha = np.clip((np.arange(T) - third) / third, 0.0, 1.0)
    d = _excitation("noise", a.shape[0], T, seed, burst=2 * third)
    E, overflow = _run_loop(np.asarray(design.q, float), np.asarray(design.g_hat, float),
                            a, d, fade=(alpha, b))
    stable, ratio = _verdict(np.nan_to_num(E, nan=0.0), overflow)
    return SimulationResult(E, stable, ratio, overflow)


def nyquist_check(design, plant_impulse_responses, num_points: int | None = None):
    """Exact stability test of the FIR loop via the argument principle.

    The closed loop is stable iff P(z) = 1 + Q(z)(G(z) - G_hat(z)) has no zeros
    outside the unit circle, i.e. P sampled densely on the circle has winding
    number zero.  Returns (stable, winding, min |P|) per plant.
    """
    plants = np.atleast_2d(np.asarray(plant_impulse_responses, dtype=float))
    q = np.asarray(design.q, float)
    gh = np.asarray(design.g_hat, float)
    L = max(plants.shape[1], gh.size)
    diff = np.pad(plants, ((0, 0), (0, L - plants.shape[1]))) - np.pad(gh, (0, L - gh.size))
    n = q.size + L - 1
    if num_points is None:
        num_points = 64 * int(2 ** np.ceil(np.log2(n)))
    P = 1.0 + np.fft.fft(q, num_points) * np.fft.fft(diff, num_points, axis=1)
    mag = np.abs(P)
    with np.errstate(divide="ignore", invalid="ignore"):
        turns = np.angle(np.roll(P, -1, axis=1) / P)
    winding = np.rint(np.sum(turns, axis=1) / (2 * np.pi)).astype(int)
    zero = np.any(mag == 0, axis=1)
    return (winding == 0) & ~zero, winding, mag.min(axis=1)


def model_margins(design, model, samples: int = 1024) -> np.ndarray:
    """Signed per-bin margin: min |1 + Q (G - G_hat)| over the model boundary.

    Negative when -1 is not excluded.
    """
    Q = design.q_response(model.grid)
    Gh = design.g_hat_response(model.grid)
    out = np.empty(model.grid.num_bins)
    for k, m in enumerate(model.bins):
        r = exclusion_oracle(Q[k], m, Gh[k], samples)
        out[k] = r.margin if r.excluded else -r.margin
    return out


@dataclass
class VerificationReport:
    grid: FrequencyGrid
    labels: list
    sensitivity: dict  # model name -> (M, K) complex
    observation_margins: dict  # model name -> (M, K) |1 + Q (G_i - G_hat)|
    model_margins: dict  # model name -> (K,) signed margin, or None
    simulation: dict  # model name -> SimulationResult or None
    verdicts: dict  # model name -> (M,) bool
    waterbed: dict  # model name -> float
    losses: dict
    areas: dict = field(default_factory=dict)  # model kind -> (K,)
    runtime: dict = field(default_factory=dict)

    @property
    def model_names(self) -> list:
        return list(self.sensitivity)


def verify(designs: dict, obs, models: dict | None = None, simulate: bool = True,
           horizon: int | None = None, seed: int = 0, margin_samples: int = 1024
           ) -> VerificationReport:
    """Evaluate each named design against every observation.

    ``models`` maps design names to the uncertainty model they were designed
    for (used for margins and areas); missing entries skip those checks.
    """
    models = models or {}
    sens, obs_m, mod_m, sims, verdicts, wb, losses, areas, rt = ({} for _ in range(9))
    for name, design in designs.items():
        if design.grid != obs.grid:
            raise ConfigurationError(f"design {name!r} was made on a different grid")
        t0 = time.perf_counter()
        S = closed_loop_response(design, obs.responses)
        sens[name] = S
        Q, Gh = design.q_response(), design.g_hat_response()
        obs_m[name] = np.abs(1.0 + Q * (obs.responses - Gh))
        model = models.get(name)
        mm = model_margins(design, model, margin_samples) if model is not None else None
        mod_m[name] = mm
        if model is not None:
            areas.setdefault(model.kind, model.areas())
        freq_ok = np.all(obs_m[name] > BOUNDARY_TOL, axis=1)
        if mm is not None:
            freq_ok &= bool(np.all(mm > 0))
        sim = None
        if simulate:
            if obs.impulse_responses is None:
                raise ConfigurationError("time-domain verification needs impulse responses")
            sim = simulate_closed_loop(design, obs.impulse_responses, "impulse", horizon, seed)
            verdicts[name] = sim.stable & freq_ok
        else:
            verdicts[name] = freq_ok
        sims[name] = sim
        S_nom = nominal_sensitivity_full_circle(design.q, design.g_hat)
        wb[name] = waterbed_functional(S_nom)
        losses[name] = design.loss
        rt[name] = time.perf_counter() - t0
    return VerificationReport(obs.grid, list(obs.labels), sens, obs_m, mod_m, sims, verdicts,
                              wb, losses, areas, rt)


def decibel_mean(S) -> np.ndarray:
    """Mean over observations of 20 log10 |S| (order invariant)."""
    return np.mean(to_db(np.atleast_2d(S)), axis=0)


def attenuation_metrics(report: VerificationReport, fraction: float = 6.0,
                        overshoot_above_hz: float = 1000.0) -> dict:
    """Per-model dB-mean curves and headline numbers plus pairwise improvements."""
    f = report.grid.frequencies
    out = {"models": {}, "improvements": {}}
    curves = {}
    for name, S in report.sensitivity.items():
        mean = decibel_mean(S)
        smooth = octave_smooth(mean, report.grid, fraction)
        curves[name] = smooth
        k = int(np.argmin(smooth))
        hi = f > overshoot_above_hz
        out["models"][name] = {
            "mean_db": mean,
            "smoothed_db": smooth,
            "peak_attenuation_db": float(-smooth[k]),
            "peak_frequency_hz": float(f[k]),
            "overshoot_db": float(np.max(smooth[hi])) if np.any(hi) else float("nan"),
            "max_db": float(np.max(mean)),
        }
    names = list(curves)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            # positive where b attenuates more than a
            out["improvements"][(a, b)] = curves[a] - curves[b]
    return out


# -- report emission ---------------------------------------------------------

def _svg_plot(path: Path, title: str, x, series: dict, xlabel: str, ylabel: str,
              logx: bool = True) -> None:
    W, H, m = 720, 420, 60
    x = np.asarray(x, dtype=float)
    xs = np.log10(x) if logx else x
    ys = [np.asarray(v, dtype=float) for v in series.values()]
    finite = np.concatenate([y[np.isfinite(y)] for y in ys]) if ys else np.zeros(1)
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    x0, x1 = float(xs.min()), float(xs.max())
    if x1 <= x0:
        x1 = x0 + 1.0

    def px(v):
        return m + (v - x0) / (x1 - x0) * (W - 2 * m)

    def py(v):
        return H - m - (v - lo) / (hi - lo) * (H - 2 * m)

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(W), height=str(H),
                     viewBox=f"0 0 {W} {H}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(W), height=str(H), fill="white")
    ET.SubElement(svg, "text", x=str(W / 2), y="24", attrib={"text-anchor": "middle",
                                                            "font-size": "16"}).text = title
    ET.SubElement(svg, "rect", x=str(m), y=str(m), width=str(W - 2 * m),
                  height=str(H - 2 * m), fill="none", stroke="black")
    ET.SubElement(svg, "text", x=str(W / 2), y=str(H - 15),
                  attrib={"text-anchor": "middle", "font-size": "12"}).text = xlabel
    ET.SubElement(svg, "text", x="15", y=str(H / 2),
                  attrib={"text-anchor": "middle", "font-size": "12",
                          "transform": f"rotate(-90 15 {H / 2})"}).text = ylabel
    for v in np.linspace(lo, hi, 5):
        ET.SubElement(svg, "text", x=str(m - 5), y=f"{py(v):.1f}",
                      attrib={"text-anchor": "end", "font-size": "10"}).text = f"{v:.3g}"
    ticks = [10.0 ** e for e in range(int(np.floor(x0)), int(np.ceil(x1)) + 1)] if logx \
        else list(np.linspace(x0, x1, 5))
    for t in ticks:
        tv = np.log10(t) if logx else t
        if x0 <= tv <= x1:
            ET.SubElement(svg, "text", x=f"{px(tv):.1f}", y=str(H - m + 14),
                          attrib={"text-anchor": "middle", "font-size": "10"}).text = f"{t:g}"
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    for i, (name, y) in enumerate(zip(series, ys)):
        ok = np.isfinite(y)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xs[ok], y[ok]))
        c = colors[i % len(colors)]
        ET.SubElement(svg, "polyline", points=pts, fill="none", stroke=c,
                      attrib={"stroke-width": "1.5"})
        ET.SubElement(svg, "text", x=str(W - m - 5), y=str(m + 16 + 14 * i), fill=c,
                      attrib={"text-anchor": "end", "font-size": "11"}).text = str(name)
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)


def emit_report(report: VerificationReport, out_dir) -> list:
    """Write report.csv, areas.csv and SVG plots; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    f = report.grid.frequencies
    written = []
    path = out / "report.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "observation", "label", "bin", "f", "S_db", "margin"])
        for name, S in report.sensitivity.items():
            db = to_db(S)
            marg = report.observation_margins[name]
            for i in range(S.shape[0]):
                lab = report.labels[i] if i < len(report.labels) else ""
                for k in range(S.shape[1]):
                    w.writerow([name, i, lab, k, repr(float(f[k])), repr(float(db[i, k])),
                                repr(float(marg[i, k]))])
    written.append(path)
    path = out / "areas.csv"
    kinds = list(report.areas)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "f"] + kinds)
        for k in range(report.grid.num_bins):
            w.writerow([k, repr(float(f[k]))] + [repr(float(report.areas[c][k])) for c in kinds])
    written.append(path)
    metrics = attenuation_metrics(report)
    series = {n: m["smoothed_db"] for n, m in metrics["models"].items()}
    plots = [("sensitivity.svg", "Decibel-mean sensitivity (1/6 octave)", series, "|S| [dB]")]
    if report.areas:
        plots.append(("areas.svg", "Uncertainty set area per bin",
                      {k: np.log10(np.maximum(v, 1e-300)) for k, v in report.areas.items()},
                      "log10 area"))
    margins = {n: v for n, v in report.model_margins.items() if v is not None}
    if margins:
        plots.append(("margins.svg", "Stability margin per bin", margins,
                      "min |1 + Q(G - G_hat)|"))
    for fname, title, ser, ylabel in plots:
        p = out / fname
        _svg_plot(p, title, f, ser, "frequency [Hz]", ylabel)
        written.append(p)
    return written
