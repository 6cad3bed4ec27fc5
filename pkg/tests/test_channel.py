import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rlbeam.array import ArrayGeometry, ImpairmentSpec, array_response, sample_impaired_geometry
from rlbeam.beams import gain
from rlbeam.channel import (
    ChannelSet,
    PathComponent,
    ScenarioParams,
    generate_scenario,
    load_channels,
    normalize,
    save_channels,
    synthesize_channel,
)

from conftest import random_channels


def test_single_path_is_response():
    geo = ArrayGeometry.ideal(8)
    np.testing.assert_allclose(synthesize_channel(geo, [PathComponent(1, 0.4)]), array_response(geo, 0.4))
    np.testing.assert_allclose(
        synthesize_channel(geo, [PathComponent(1, 0.4), PathComponent(1, 0.4)]),
        2 * array_response(geo, 0.4),
    )


def test_multipath_matches_loop(rng):
    geo = sample_impaired_geometry(ImpairmentSpec(6, 0.5, 0.05, 0.2, seed=1))
    paths = [PathComponent(complex(*rng.standard_normal(2)), rng.uniform(0, np.pi)) for _ in range(5)]
    want = np.zeros(6, complex)
    for p in paths:
        for m in range(6):
            want[m] += p.gain * np.exp(1j * (2 * np.pi * geo.positions[m] * np.cos(p.aoa) + geo.phase_mismatch[m]))
    np.testing.assert_allclose(synthesize_channel(geo, paths), want, atol=1e-12)


@given(st.complex_numbers(max_magnitude=1e3, allow_nan=False, allow_infinity=False))
def test_linear_in_gains(c):
    geo = ArrayGeometry.ideal(4)
    base = [PathComponent(0.5 - 0.2j, 0.3), PathComponent(-0.1j, 2.0)]
    scaled = [PathComponent(c * p.gain, p.aoa) for p in base]
    np.testing.assert_allclose(
        synthesize_channel(geo, scaled), c * synthesize_channel(geo, base), atol=1e-9 * max(1, abs(c))
    )


def test_empty_paths_rejected():
    with pytest.raises(ValueError):
        synthesize_channel(ArrayGeometry.ideal(2), [])


def test_degenerate_span_gives_single_direction():
    geo = ArrayGeometry.ideal(8)
    params = ScenarioParams(spans=[[60, 60]], n_paths=1)
    cs = generate_scenario("LOS", geo, 1, seed=0, params=params)
    h = cs.channels[0]
    a = array_response(geo, np.deg2rad(60))
    alpha = np.vdot(a, h) / 8
    np.testing.assert_allclose(h, alpha * a, atol=1e-12)


def test_los_dominant_path_drives_pattern():
    geo = ArrayGeometry.ideal(16)
    cs = generate_scenario("LOS", geo, 50, seed=2, params=ScenarioParams(spans=[[80, 100]]))
    grid = np.deg2rad(np.linspace(0, 180, 721))
    A = array_response(geo, grid) / 4
    peaks = np.rad2deg(grid[np.argmax(np.abs(A.conj() @ cs.channels.T) ** 2, axis=0)])
    assert np.all((peaks > 75) & (peaks < 105))


def test_nlos_energy_near_reflectors():
    geo = ArrayGeometry.ideal(16)
    refl = [50.0, 130.0]
    cs = generate_scenario("NLOS", geo, 100, seed=5, params=ScenarioParams(reflectors=refl))
    grid_deg = np.linspace(0, 180, 721)
    A = array_response(geo, np.deg2rad(grid_deg)) / 4
    scan = np.abs(A.conj() @ cs.channels.T) ** 2  # (angles, users)
    near = np.zeros(grid_deg.size, bool)
    for c in refl:
        # mainlobe half-width of a 16-element ULA around 50/130 deg plus scatter
        near |= np.abs(grid_deg - c) < 15
    frac = scan[near].sum(axis=0) / scan.sum(axis=0)
    assert np.all(frac > 0.7)


def test_scenario_determinism_and_errors():
    geo = ArrayGeometry.ideal(8)
    a = generate_scenario("LOS", geo, 300, seed=3)
    b = generate_scenario("LOS", geo, 300, seed=3)
    assert a == b
    assert a.geometry_id == geo.fingerprint()
    with pytest.raises(ValueError):
        generate_scenario("LOS", geo, 0, seed=0)
    with pytest.raises(ValueError):
        generate_scenario("LOS", geo, 1, seed=0, params=ScenarioParams(spans=[[10, 5]]))
    with pytest.raises(ValueError):
        generate_scenario("LOS", geo, 1, seed=0, params=ScenarioParams(spans=[]))
    with pytest.raises(ValueError):
        generate_scenario("MIXED", geo, 1, seed=0)


def test_normalize_examples(rng):
    cs = ChannelSet(np.array([[1, 4j], [2, -3]]))
    n, delta = normalize(cs)
    assert delta == 4.0
    assert np.max(np.abs(n.channels)) == 1.0
    n2, d2 = normalize(n)
    assert d2 == 1.0 and np.array_equal(n2.channels, n.channels)
    cs = ChannelSet(random_channels(rng, 20, 8) * 37.0)
    n, _ = normalize(cs)
    assert abs(np.max(np.abs(n.channels)) - 1) <= 1e-12
    with pytest.raises(ValueError):
        normalize(ChannelSet(np.zeros((2, 3))))


def test_normalize_preserves_gain_ratios(rng):
    cs = ChannelSet(random_channels(rng, 2, 6) * 5)
    n, _ = normalize(cs)
    w = np.exp(1j * rng.uniform(-np.pi, np.pi, 6)) / np.sqrt(6)
    r0 = gain(w, cs.channels[0]) / gain(w, cs.channels[1])
    r1 = gain(w, n.channels[0]) / gain(w, n.channels[1])
    assert abs(r0 - r1) < 1e-12 * abs(r0)


@pytest.mark.parametrize("suffix", [".bfch", ".json"])
def test_round_trip(tmp_path, rng, suffix):
    cs = ChannelSet(random_channels(rng, 7, 5))
    p = tmp_path / f"c{suffix}"
    save_channels(cs, p)
    back = load_channels(p)
    assert back.channels.tobytes() == cs.channels.tobytes()


def test_binary_layout(tmp_path):
    cs = ChannelSet(np.array([[1 + 2j, 3 - 4j]]))
    save_channels(cs, tmp_path / "c.bfch")
    raw = (tmp_path / "c.bfch").read_bytes()
    assert raw[:4] == b"BFCH"
    assert struct.unpack("<III", raw[4:16]) == (1, 2, 1)
    assert struct.unpack("<4d", raw[16:]) == (1.0, 2.0, 3.0, -4.0)


def test_loader_validation(tmp_path):
    p = tmp_path / "bad.bfch"
    p.write_bytes(struct.pack("<4sIII", b"BFCH", 1, 2, 2) + np.zeros(3, "<c16").tobytes())
    with pytest.raises(ValueError, match="inconsistent"):
        load_channels(p)
    p.write_bytes(struct.pack("<4sIII", b"XXXX", 1, 2, 1) + np.zeros(2, "<c16").tobytes())
    with pytest.raises(ValueError, match="header"):
        load_channels(p)
    h = np.zeros((3, 2), "<c16")
    h[2, 1] = np.nan
    p.write_bytes(struct.pack("<4sIII", b"BFCH", 1, 2, 3) + h.tobytes())
    with pytest.raises(ValueError, match="user 2"):
        load_channels(p)
    j = tmp_path / "bad.json"
    j.write_text('{"magic": "BFCH", "version": 1, "M": 2, "K": 2, "channels": [[[1,0],[0,1]], [[1,0]]]}')
    with pytest.raises(ValueError, match="user 1"):
        load_channels(j)


def test_channelset_is_immutable(rng):
    cs = ChannelSet(random_channels(rng, 2, 2))
    with pytest.raises(ValueError):
        cs.channels[0, 0] = 0
    assert cs.subset([1]).K == 1
