import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anckit import geometry
from anckit.dataio import isotropic_synthetic
from anckit.errors import ConfigurationError, DataFormatError, FitError, SchemaError
from anckit.geometry import Disk
from anckit.sigproc import FrequencyGrid
from anckit.uncertainty import (KINDS, UncertaintyModel, fit_models, load_model,
                                save_model, transform_model)


@pytest.fixture(scope="module")
def small_obs():
    return isotropic_synthetic(FrequencyGrid.linear(48000.0, 32), num_observations=12, seed=3)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("guard", [0.0, 0.1])
def test_fit_encloses_observations(small_obs, kind, guard):
    m = fit_models(small_obs, kind, guard_band=guard)
    assert m.kind == kind and len(m) == small_obs.grid.num_bins
    m.check_enclosure(small_obs.responses)
    assert m.provenance["guard_band"] == guard


def test_guard_band_adds_margin(small_obs):
    bare = fit_models(small_obs, "convex_hull", guard_band=0.0).areas()
    guarded = fit_models(small_obs, "convex_hull", guard_band=0.1).areas()
    assert np.all(guarded > bare)


def test_areas_nest(small_obs):
    a = {k: fit_models(small_obs, k).areas() for k in ("norm_bounded", "elliptic", "convex_hull")}
    assert np.all(a["convex_hull"] <= a["elliptic"] * (1 + 1e-9))
    assert np.all(a["elliptic"] <= a["norm_bounded"] * (1 + 1e-6))


def test_fit_rejects_bad_arguments(small_obs):
    with pytest.raises(ConfigurationError):
        fit_models(small_obs, "polygon")
    with pytest.raises(ConfigurationError):
        fit_models(small_obs, "convex_hull", guard_band=-1)
    with pytest.raises(ConfigurationError):
        fit_models(small_obs.subset([0, 1]), "convex_hull")


def test_check_enclosure_reports_bin():
    grid = FrequencyGrid.linear(8000.0, 2)
    m = UncertaintyModel("norm_bounded", grid, [Disk(0, 1), Disk(0, 1)])
    with pytest.raises(FitError) as info:
        m.check_enclosure(np.array([[0.5, 2.0]]))
    assert info.value.bin_index == 1


def test_model_validation():
    grid = FrequencyGrid.linear(8000.0, 2)
    with pytest.raises(ConfigurationError):
        UncertaintyModel("norm_bounded", grid, [Disk(0, 1)])
    with pytest.raises(ConfigurationError):
        UncertaintyModel("blob", grid, [Disk(0, 1)] * 2)


@given(st.complex_numbers(min_magnitude=0.1, max_magnitude=5, allow_nan=False,
                          allow_infinity=False))
def test_transform_maps_membership(C):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=10) + 1j * rng.normal(size=10)
    inner = 0.9 * (pts - pts.mean()) + pts.mean()
    for m in (geometry.smallest_circle(pts), geometry.min_area_ellipse(pts),
              geometry.convex_hull(pts), geometry.fit_multi_disk(pts, 3)):
        t = transform_model(m, C)
        assert type(t) is type(m)
        assert geometry.area(t) == pytest.approx(abs(C) ** 2 * geometry.area(m), rel=2e-2)
        tol = 1e-9 * abs(C) * 10
        assert np.all(geometry.contains(t, C * inner, tol=tol))


def test_transform_zero_and_bad_gain():
    d = Disk(1, 1)
    assert transform_model(d, 0) == Disk(0, 0)
    with pytest.raises(ConfigurationError):
        transform_model(d, complex("nan"))
    with pytest.raises(TypeError):
        transform_model(object(), 1.0)


@pytest.mark.parametrize("kind", KINDS)
def test_model_roundtrip(small_obs, kind, tmp_path):
    m = fit_models(small_obs, kind)
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back.kind == kind and back.grid == m.grid
    np.testing.assert_allclose(back.areas(), m.areas(), rtol=1e-12)


def test_load_model_errors(small_obs, tmp_path):
    m = fit_models(small_obs, "norm_bounded")
    save_model(m, tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    for key, value, err in (("version", "9", SchemaError), ("kind", "blob", SchemaError)):
        bad = dict(doc, **{key: value})
        (tmp_path / "bad.json").write_text(json.dumps(bad))
        with pytest.raises(err):
            load_model(tmp_path / "bad.json")
    bad = dict(doc, bins=doc["bins"][1:])
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    with pytest.raises(DataFormatError, match="bin 0"):
        load_model(tmp_path / "bad.json")
    (tmp_path / "junk.json").write_text("{")
    with pytest.raises(DataFormatError):
        load_model(tmp_path / "junk.json")


def test_isotropic_clouds_are_circular():
    obs = isotropic_synthetic(FrequencyGrid.linear(48000.0, 16), num_observations=24)
    ell = fit_models(obs, "elliptic", guard_band=0.0)
    disk = fit_models(obs, "norm_bounded", guard_band=0.0)
    for e, d in zip(ell.bins, disk.bins):
        assert e.b / e.a > 0.999
        assert e.a == pytest.approx(d.radius, rel=1e-3)
        assert e.center == pytest.approx(d.center, abs=1e-6)
