"""Observation sets: file ingestion, synthetic generation, and controller export."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from anckit.errors import ConfigurationError, DataFormatError, SchemaError
from anckit.sigproc import FrequencyGrid, evaluate_coefficients

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
FIT_LABELS = ("normal", "loose", "tight", "other")


@dataclass
class ObservationSet:
    """M complex responses on a shared grid; ``impulse_responses`` kept when known."""

    grid: FrequencyGrid
    responses: np.ndarray
    labels: list = field(default_factory=list)
    metadata: str = ""
    impulse_responses: np.ndarray | None = None

    def __post_init__(self):
        r = np.atleast_2d(np.asarray(self.responses, dtype=complex))
        if r.shape[0] < 1:
            raise DataFormatError("observation set is empty")
        if r.shape[1] != self.grid.num_bins:
            raise DataFormatError(
                f"responses have {r.shape[1]} bins, grid has {self.grid.num_bins}")
        bad = ~np.all(np.isfinite(r), axis=1)
        if np.any(bad):
            raise DataFormatError(f"non-finite values in observation {int(np.argmax(bad))}")
        self.responses = r
        if not self.labels:
            self.labels = ["other"] * r.shape[0]
        if len(self.labels) != r.shape[0]:
            raise DataFormatError("one label per observation required")
        self.labels = [str(lbl) for lbl in self.labels]
        if self.impulse_responses is not None:
            h = np.atleast_2d(np.asarray(self.impulse_responses, dtype=float))
            if h.shape[0] != r.shape[0]:
                raise DataFormatError("one impulse response per observation required")
            self.impulse_responses = h

    @property
    def num_observations(self) -> int:
        return self.responses.shape[0]

    def indices(self, label: str) -> np.ndarray:
        return np.array([i for i, lbl in enumerate(self.labels) if lbl == label], dtype=int)

    def subset(self, idx) -> "ObservationSet":
        idx = np.asarray(idx, dtype=int)
        h = None if self.impulse_responses is None else self.impulse_responses[idx]
        return ObservationSet(self.grid, self.responses[idx],
                              [self.labels[i] for i in idx], self.metadata, h)


def observations_from_impulse_responses(impulse_responses, grid: FrequencyGrid,
                                        labels=None, metadata: str = "") -> ObservationSet:
    rows = [np.asarray(h, dtype=float) for h in impulse_responses]
    for i, h in enumerate(rows):
        if h.size == 0:
            raise DataFormatError(f"impulse response {i} is empty")
        if not np.all(np.isfinite(h)):
            raise DataFormatError(f"non-finite sample in impulse response {i}")
    length = max(h.size for h in rows)
    padded = np.zeros((len(rows), length))
    for i, h in enumerate(rows):
        padded[i, :h.size] = h
    resp = np.array([evaluate_coefficients(h, grid.bins) for h in padded])
    return ObservationSet(grid, resp, list(labels or []), metadata, padded)


def internal_model(obs: ObservationSet, label: str = "normal") -> np.ndarray:
    """Fixed internal model: mean impulse response of the ``label`` observations.

    Falls back to every observation when none carries the label.
    """
    if obs.impulse_responses is None:
        raise ConfigurationError("the internal model needs impulse responses")
    idx = obs.indices(label)
    if idx.size == 0:
        log.warning("no %r observations; averaging all of them for the internal model", label)
        idx = np.arange(obs.num_observations)
    g_hat = obs.impulse_responses[idx].mean(axis=0)
    if g_hat[0] != 0:
        raise ConfigurationError("the internal model needs a pure delay (zero first sample)")
    return g_hat


# -- synthetic populations ---------------------------------------------------

@dataclass
class SyntheticFitConfig:
    num_normal: int = 24
    num_loose: int = 8
    num_tight: int = 8
    resonance_hz: tuple = (90.0, 150.0)
    resonance_q: tuple = (1.0, 1.6)
    normal_gain_db: tuple = (-2.0, 2.0)
    loose_shift_factor: tuple = (1.3, 2.2)
    loose_lowfreq_drop_db: tuple = (6.0, 18.0)
    tight_gain_db: tuple = (6.0, 6.0)
    canal_hz: tuple = (2500.0, 6000.0)
    canal_gain_db: tuple = (-4.0, 4.0)
    driver_cutoff_hz: float = 7000.0
    delay_samples: int = 2
    ir_length: int = 2048
    rng_seed: int = 7

    def validate(self):
        counts = (self.num_normal, self.num_loose, self.num_tight)
        if any(c < 0 for c in counts) or sum(counts) == 0:
            raise ConfigurationError("synthetic config needs at least one observation")
        if self.num_normal < 1:
            raise ConfigurationError("at least one normal fit is required for the internal model")
        if self.delay_samples < 1:
            raise ConfigurationError("delay_samples must be >= 1")
        if min(self.loose_shift_factor) <= 1.0:
            raise ConfigurationError("loose_shift_factor must exceed 1")
        for name in ("resonance_hz", "resonance_q", "normal_gain_db", "loose_shift_factor",
                     "loose_lowfreq_drop_db", "tight_gain_db", "canal_hz", "canal_gain_db"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name}: lower bound exceeds upper bound")
        if self.ir_length <= self.delay_samples + 8:
            raise ConfigurationError("ir_length too short")


def _rbj(kind: str, f0: float, fs: float, q: float = 0.7071, gain_db: float = 0.0):
    """Audio-EQ-cookbook biquad coefficients (b, a)."""
    w0 = 2 * math.pi * f0 / fs
    cw, sw = math.cos(w0), math.sin(w0)
    alpha = sw / (2 * q)
    A = 10 ** (gain_db / 40)
    if kind == "highpass":
        b = [(1 + cw) / 2, -(1 + cw), (1 + cw) / 2]
        a = [1 + alpha, -2 * cw, 1 - alpha]
    elif kind == "lowpass":
        b = [(1 - cw) / 2, 1 - cw, (1 - cw) / 2]
        a = [1 + alpha, -2 * cw, 1 - alpha]
    elif kind == "peaking":
        b = [1 + alpha * A, -2 * cw, 1 - alpha * A]
        a = [1 + alpha / A, -2 * cw, 1 - alpha / A]
    elif kind == "lowshelf":
        sa = 2 * math.sqrt(A) * alpha
        b = [A * ((A + 1) - (A - 1) * cw + sa), 2 * A * ((A - 1) - (A + 1) * cw),
             A * ((A + 1) - (A - 1) * cw - sa)]
        a = [(A + 1) + (A - 1) * cw + sa, -2 * ((A - 1) + (A + 1) * cw),
             (A + 1) + (A - 1) * cw - sa]
    else:
        raise ValueError(kind)
    return np.asarray(b) / a[0], np.asarray(a) / a[0]


# shelf corner chosen so the boost is essentially flat up to 1 kHz
_TIGHT_SHELF_HZ = 2500.0
_LOOSE_SHELF_HZ = 200.0


def _synth_response(rng, cfg: SyntheticFitConfig, fs: float, label: str) -> np.ndarray:
    f_res = rng.uniform(*cfg.resonance_hz)
    q_res = rng.uniform(*cfg.resonance_q)
    gain = 10 ** (rng.uniform(*cfg.normal_gain_db) / 20)
    sections = []
    if label == "loose":
        f_res *= rng.uniform(*cfg.loose_shift_factor)
        drop = rng.uniform(*cfg.loose_lowfreq_drop_db)
        sections.append(_rbj("lowshelf", _LOOSE_SHELF_HZ, fs, gain_db=-drop))
    elif label == "tight":
        boost = rng.uniform(*cfg.tight_gain_db)
        sections.append(_rbj("lowshelf", _TIGHT_SHELF_HZ, fs, gain_db=boost))
    sections.append(_rbj("highpass", f_res, fs, q=q_res))
    sections.append(_rbj("lowpass", cfg.driver_cutoff_hz, fs, q=0.7071))
    sections.append(_rbj("peaking", rng.uniform(*cfg.canal_hz), fs, q=2.0,
                         gain_db=rng.uniform(*cfg.canal_gain_db)))
    x = np.zeros(cfg.ir_length)
    x[cfg.delay_samples] = gain
    for b, a in sections:
        x = signal.lfilter(b, a, x)
    fade = max(cfg.ir_length // 8, 1)
    x[-fade:] *= 0.5 * (1 + np.cos(np.pi * np.arange(1, fade + 1) / fade))
    return x


def generate_synthetic(config: SyntheticFitConfig, grid: FrequencyGrid) -> ObservationSet:
    """Synthetic secondary-path family: delay, resonant high-pass, driver roll-off.

    Loose fits move the resonance up and cut below 200 Hz; tight fits boost
    broadband below 1 kHz. The seed fixes every draw.
    """
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    labels = (["normal"] * config.num_normal + ["loose"] * config.num_loose
              + ["tight"] * config.num_tight)
    irs = [_synth_response(rng, config, grid.sample_rate, lbl) for lbl in labels]
    meta = f"synthetic seed={config.rng_seed}"
    return observations_from_impulse_responses(irs, grid, labels, meta)


def isotropic_synthetic(grid: FrequencyGrid, num_observations: int = 24,
                        relative_radius: float = 0.3, delay_samples: int = 2,
                        seed: int = 0) -> ObservationSet:
    """Responses spread evenly on a circle around a pure-delay plant at every bin.

    Observation i is exp(-j w d) (1 + r exp(j t_i)) with d = ``delay_samples``.
    A common complex factor at all frequencies has no real impulse response, so
    the set carries frequency responses only; the matching internal model is the
    pure delay (see :func:`delay_model`).
    """
    if num_observations < 1 or relative_radius <= 0 or delay_samples < 1:
        raise ConfigurationError("isotropic set needs observations, a positive radius "
                                 "and a delay of at least one sample")
    rng = np.random.default_rng(seed)
    t = 2 * np.pi * (np.arange(num_observations) + rng.uniform()) / num_observations
    centre = np.exp(-1j * delay_samples * grid.bins)
    resp = centre[None, :] * (1 + relative_radius * np.exp(1j * t))[:, None]
    return ObservationSet(grid, resp, ["normal"] * num_observations,
                          f"isotropic seed={seed} delay={delay_samples}")


def delay_model(delay_samples: int) -> np.ndarray:
    """Impulse response of a pure delay of ``delay_samples`` samples."""
    if delay_samples < 1:
        raise ConfigurationError("an internal model needs a delay of at least one sample")
    g = np.zeros(delay_samples + 1)
    g[delay_samples] = 1.0
    return g


# -- observation files -------------------------------------------------------

def _pairs(values) -> list:
    return [[float(v.real), float(v.imag)] for v in values]


def _from_pairs(rows, what: str) -> np.ndarray:
    arr = np.asarray(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DataFormatError(f"{what}: complex values must be [re, im] pairs")
    return arr[:, 0] + 1j * arr[:, 1]


def save_observations(obs: ObservationSet, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt == "json":
        doc = {"version": SCHEMA_VERSION, "kind": "observations",
               "grid": obs.grid.to_dict(), "labels": obs.labels, "metadata": obs.metadata,
               "responses": [_pairs(r) for r in obs.responses]}
        if obs.impulse_responses is not None:
            doc["impulse_responses"] = [[float(x) for x in h] for h in obs.impulse_responses]
        path.write_text(json.dumps(doc))
    elif fmt == "csv":
        buf = io.StringIO()
        buf.write(f"# anckit observations v{SCHEMA_VERSION} fs={obs.grid.sample_rate!r}\n")
        buf.write("# labels=" + ",".join(obs.labels) + "\n")
        if obs.metadata:
            buf.write("# metadata=" + obs.metadata.replace("\n", " ") + "\n")
        w = csv.writer(buf, lineterminator="\n")
        header = ["omega"]
        for i in range(obs.num_observations):
            header += [f"re_{i}", f"im_{i}"]
        w.writerow(header)
        for k, om in enumerate(obs.grid.bins):
            row = [repr(float(om))]
            for v in obs.responses[:, k]:
                row += [repr(float(v.real)), repr(float(v.imag))]
            w.writerow(row)
        path.write_text(buf.getvalue())
    else:
        raise ConfigurationError(f"unsupported observation format {fmt!r}")


def _parse_comments(lines) -> dict:
    meta = {}
    for line in lines:
        body = line.lstrip("#").strip()
        for token in body.split(" "):
            if "=" in token and not body.startswith(("labels=", "metadata=")):
                k, v = token.split("=", 1)
                meta[k] = v
        if body.startswith("labels="):
            meta["labels"] = [s for s in body[len("labels="):].split(",") if s]
        elif body.startswith("metadata="):
            meta["metadata"] = body[len("metadata="):]
    return meta


def _need_grid(grid, fs_hint, what):
    if grid is None:
        raise ConfigurationError(f"{what} carry impulse responses only; a grid is required")
    if fs_hint is not None and float(fs_hint) != grid.sample_rate:
        raise ConfigurationError(
            f"file sample rate {fs_hint} Hz differs from grid {grid.sample_rate} Hz")
    return grid


def _load_json(path: Path, grid):
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from exc
    version = str(doc.get("version", SCHEMA_VERSION))
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{path}: expected version {SCHEMA_VERSION}, found {version}")
    labels = doc.get("labels") or []
    meta = doc.get("metadata", "")
    if "responses" in doc:
        file_grid = FrequencyGrid.from_dict(doc["grid"])
        rows = []
        for i, r in enumerate(doc["responses"]):
            row = _from_pairs(r, f"{path}: response {i}")
            if row.size != file_grid.num_bins:
                raise DataFormatError(
                    f"{path}: response {i} has {row.size} bins, expected {file_grid.num_bins}")
            rows.append(row)
        irs = doc.get("impulse_responses")
        return ObservationSet(file_grid, np.array(rows), labels, meta,
                              None if irs is None else np.asarray(irs, dtype=float))
    if "impulse_responses" in doc:
        if grid is None and "grid" in doc:
            grid = FrequencyGrid.from_dict(doc["grid"])
        grid = _need_grid(grid, doc.get("fs"), str(path))
        return observations_from_impulse_responses(doc["impulse_responses"], grid, labels, meta)
    raise DataFormatError(f"{path}: neither 'responses' nor 'impulse_responses' present")


def _load_csv(path: Path, grid):
    text = path.read_text()
    lines = text.splitlines()
    comments = [ln for ln in lines if ln.startswith("#")]
    body = [ln for ln in lines if ln.strip() and not ln.startswith("#")]
    meta = _parse_comments(comments)
    if not body:
        raise DataFormatError(f"{path}: no data rows")
    rows = list(csv.reader(body))
    header = None
    try:
        [float(x) for x in rows[0]]
    except ValueError:
        header, rows = rows[0], rows[1:]
    width = len(header) if header else len(rows[0])
    for n, row in enumerate(rows):
        if len(row) != width:
            raise DataFormatError(f"{path}: row {n} has {len(row)} fields, expected {width}")
    try:
        data = np.array([[float(x) for x in row] for row in rows])
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    if not np.all(np.isfinite(data)):
        bad = np.argwhere(~np.isfinite(data))[0]
        raise DataFormatError(f"{path}: non-finite value at row {bad[0]}, column {bad[1]}")
    labels = meta.get("labels", [])
    if header and header[0] == "omega":
        if (width - 1) % 2:
            raise DataFormatError(f"{path}: expected (re, im) column pairs")
        fs = float(meta["fs"]) if "fs" in meta else (grid.sample_rate if grid else None)
        if fs is None:
            raise DataFormatError(f"{path}: sample rate unknown (add '# fs=...')")
        file_grid = FrequencyGrid(fs, data[:, 0])
        resp = (data[:, 1::2] + 1j * data[:, 2::2]).T
        return ObservationSet(file_grid, resp, labels, meta.get("metadata", ""))
    grid = _need_grid(grid, meta.get("fs"), str(path))
    return observations_from_impulse_responses(data.T, grid, labels, meta.get("metadata", ""))


def _read_wav(path: Path):
    from scipy.io import wavfile

    fs, data = wavfile.read(path)
    if data.ndim != 1:
        raise DataFormatError(f"{path}: expected a mono file")
    if data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:
        x = data / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(float)
    else:
        raise DataFormatError(f"{path}: unsupported sample format {data.dtype}")
    return fs, x


def _load_wav_dir(path: Path, grid):
    files = sorted(path.glob("*.wav"))
    if not files:
        raise DataFormatError(f"{path}: no .wav files")
    irs, labels = [], []
    for f in files:
        fs, x = _read_wav(f)
        _need_grid(grid, fs, str(f))
        prefix = f.stem.split("_")[0].lower()
        labels.append(prefix if prefix in FIT_LABELS else "other")
        irs.append(x)
    return observations_from_impulse_responses(irs, grid, labels, f"wav-dir {path.name}")


def load_observations(path, fmt: str | None = None,
                      grid: FrequencyGrid | None = None) -> ObservationSet:
    """Read observations from ``.json``/``.csv`` or a directory of mono WAV files.

    Impulse-response inputs are evaluated onto ``grid``.
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"{path}: no such file or directory")
    if fmt is None:
        fmt = "wav-dir" if path.is_dir() else path.suffix.lstrip(".").lower()
    if fmt == "json":
        return _load_json(path, grid)
    if fmt == "csv":
        return _load_csv(path, grid)
    if fmt == "wav-dir":
        return _load_wav_dir(path, grid)
    raise ConfigurationError(f"unsupported observation format {fmt!r}")


# -- controllers -------------------------------------------------------------

def _controller_doc(design) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "controller",
        "fs": design.grid.sample_rate,
        "N": int(design.q.size),
        "q": [float(x) for x in design.q],
        "internal_model": [float(x) for x in design.g_hat],
        "model_kind": design.model_kind,
        "loss": float(design.loss),
        "grid": design.grid.to_dict(),
        "weight": [float(x) for x in design.weight],
        "provenance": design.provenance,
    }


def export_controller(design, path, fmt: str | None = None) -> None:
    """Write a controller as versioned JSON, or CSV with '#' metadata lines."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if not (np.all(np.isfinite(design.q)) and math.isfinite(design.loss)):
        raise ConfigurationError("controller contains non-finite values")
    doc = _controller_doc(design)
    try:
        if fmt == "json":
            path.write_text(json.dumps(doc, indent=1, sort_keys=True))
        elif fmt == "csv":
            buf = io.StringIO()
            head = {k: v for k, v in doc.items() if k not in ("q", "internal_model", "grid",
                                                                "weight")}
            buf.write("# " + json.dumps(head, sort_keys=True) + "\n")
            buf.write("# grid=" + json.dumps(doc["grid"]) + "\n")
            buf.write("# weight=" + json.dumps(doc["weight"]) + "\n")
            buf.write("n,q,internal_model\n")
            g = design.g_hat
            for n in range(max(design.q.size, g.size)):
                qn = repr(float(design.q[n])) if n < design.q.size else ""
                gn = repr(float(g[n])) if n < g.size else ""
                buf.write(f"{n},{qn},{gn}\n")
            path.write_text(buf.getvalue())
        else:
            raise ConfigurationError(f"unsupported controller format {fmt!r}")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def load_controller(path, fmt: str | None = None):
    from anckit.optimizer import ControllerDesign

    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: no such file")
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt == "json":
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON ({exc})") from exc
    elif fmt == "csv":
        lines = path.read_text().splitlines()
        doc = json.loads(lines[0][1:])
        doc["grid"] = json.loads(lines[1].split("=", 1)[1])
        doc["weight"] = json.loads(lines[2].split("=", 1)[1])
        rows = list(csv.reader(lines[4:]))
        doc["q"] = [float(r[1]) for r in rows if r[1] != ""]
        doc["internal_model"] = [float(r[2]) for r in rows if r[2] != ""]
    else:
        raise ConfigurationError(f"unsupported controller format {fmt!r}")
    found = str(doc.get("schema_version"))
    if found != SCHEMA_VERSION:
        raise SchemaError(f"{path}: expected schema_version {SCHEMA_VERSION}, found {found}")
    if doc.get("kind") != "controller":
        raise SchemaError(f"{path}: not a controller document")
    return ControllerDesign(
        q=np.asarray(doc["q"], dtype=float),
        g_hat=np.asarray(doc["internal_model"], dtype=float),
        grid=FrequencyGrid.from_dict(doc["grid"]),
        weight=np.asarray(doc["weight"], dtype=float),
        loss=float(doc["loss"]),
        model_kind=doc.get("model_kind", ""),
        provenance=doc.get("provenance", {}),
    )
