import csv
import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rlbeam.array import ArrayGeometry, ImpairmentSpec, array_response, sample_impaired_geometry
from rlbeam.beams import (
    BeamVector,
    Codebook,
    PhaseSet,
    average_gain,
    beam_pattern,
    beamsteering_codebook,
    codebook_objective,
    egc_beam,
    egc_codebook,
    egc_upper_bound,
    exhaustive_oracle,
    export_patterns,
    gain,
    gains_matrix,
    indices_of,
    quantize_phases,
    realize,
    snr,
    user_assignment,
)
from rlbeam.channel import ChannelSet

from conftest import random_channels


def loop_gain(w, h):
    acc = 0j
    for wm, hm in zip(w, h):
        acc += wm.conjugate() * hm
    return abs(acc) ** 2


@pytest.mark.parametrize("r", [1, 2, 3, 4])
def test_phase_set(r):
    ps = PhaseSet(r)
    v = ps.values
    assert v.size == 2**r
    assert v[-1] == np.pi
    assert np.all(v > -np.pi) and np.all(np.diff(v) > 0)
    np.testing.assert_allclose(np.diff(v), 2 * np.pi / 2**r)
    with pytest.raises(ValueError):
        PhaseSet(0)


def test_phase_set_r2_values():
    np.testing.assert_allclose(PhaseSet(2).values, [-np.pi / 2, 0, np.pi / 2, np.pi])


def test_realize_examples(rng):
    ps = PhaseSet(3)
    np.testing.assert_allclose(realize(BeamVector([7]), ps), [-1], atol=1e-15)
    w = realize(BeamVector([2, 2, 2, 2]), ps)
    assert np.allclose(w, w[0]) and abs(np.linalg.norm(w) - 1) < 1e-15
    for _ in range(20):
        b = BeamVector.random(8, ps, rng)
        w = realize(b, ps)
        np.testing.assert_allclose(np.abs(w), 1 / np.sqrt(8))
        assert indices_of(w, ps) == b
        np.testing.assert_array_equal(realize(indices_of(w, ps), ps), w)
    with pytest.raises(ValueError):
        realize(BeamVector([8]), ps)
    with pytest.raises(ValueError):
        realize(BeamVector([-1]), ps)


def test_quantize_examples():
    ps = PhaseSet(2)
    # distances from 0.6: to -pi/2 2.17, to 0 0.6, to pi/2 0.97, to pi 2.54
    assert quantize_phases([0.6], ps).indices.tolist() == [1]
    # circular seam: -3.14159 sits next to pi, linear distance would pick -pi/2
    assert quantize_phases([-3.14159], ps).indices.tolist() == [3]
    assert quantize_phases([-np.pi], ps).indices.tolist() == [3]
    # exact midpoint between 0 and pi/2 ties to the smaller index
    assert quantize_phases([np.pi / 4], ps).indices.tolist() == [1]
    with pytest.raises(ValueError):
        quantize_phases([np.nan], ps)


@given(st.integers(1, 3), st.integers(1, 4), st.data())
def test_quantize_idempotent(r, M, data):
    ps = PhaseSet(r)
    idx = data.draw(st.lists(st.integers(0, ps.size - 1), min_size=M, max_size=M))
    b = BeamVector(idx)
    assert quantize_phases(b.phases(ps), ps) == b


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.integers(1, 4))
def test_quantize_is_circular_nearest(proto, r):
    ps = PhaseSet(r)
    got = quantize_phases(proto, ps).indices
    for p, i in zip(proto, got):
        d = [min(abs(p - v) % (2 * np.pi), 2 * np.pi - abs(p - v) % (2 * np.pi)) for v in ps.values]
        assert d[i] <= min(d) + 1e-12


def test_gain_examples(rng):
    h = random_channels(rng, 1, 6)[0]
    assert abs(gain(h / np.linalg.norm(h), h) - np.linalg.norm(h) ** 2) < 1e-12
    w = np.array([1, 1]) / np.sqrt(2)
    assert gain(w, np.array([1, -1])) == 0
    for _ in range(10):
        w = np.exp(1j * rng.uniform(-np.pi, np.pi, 6)) / np.sqrt(6)
        h = random_channels(rng, 1, 6)[0]
        assert abs(gain(w, h) - loop_gain(w, h)) < 1e-12
    with pytest.raises(ValueError):
        gain(np.ones(3), np.ones(4))


def test_snr(rng):
    w = np.exp(1j * rng.uniform(-np.pi, np.pi, 4)) / 2
    h = random_channels(rng, 1, 4)[0]
    g = gain(w, h)
    assert snr(w, h, 1.0) == g
    assert snr(w, h, 2.0) == 2 * snr(w, h, 1.0)
    assert snr(w, h, 3.7) / 3.7 == pytest.approx(g, rel=1e-15)
    # unsimplified: rho * |w^H h|^2 / ||w||^2
    assert abs(snr(w, h, 3.7) - 3.7 * loop_gain(w, h) / np.linalg.norm(w) ** 2) < 1e-12
    with pytest.raises(ValueError):
        snr(w, h, 0)


def test_average_gain(rng):
    H = random_channels(rng, 10, 4)
    w = realize(BeamVector([0, 1, 2, 3]), PhaseSet(2))
    assert average_gain(w, ChannelSet(H[:1])) == pytest.approx(gain(w, H[0]), rel=1e-14)
    assert average_gain(w, ChannelSet(H)) == pytest.approx(np.mean([loop_gain(w, h) for h in H]), rel=1e-12)
    dup = ChannelSet(np.vstack([H[:1], H[:1]]))
    assert average_gain(w, dup) == pytest.approx(gain(w, H[0]), rel=1e-14)
    with pytest.raises(ValueError):
        average_gain(w, np.zeros((0, 4)))


def test_codebook_objective(rng):
    ps = PhaseSet(3)
    H = random_channels(rng, 5, 4)
    beams = [BeamVector.random(4, ps, rng) for _ in range(3)]
    cb = Codebook(beams, ps)
    want = np.mean([max(loop_gain(realize(b, ps), h) for b in beams) for h in H])
    assert codebook_objective(cb, ChannelSet(H)) == pytest.approx(want, rel=1e-12)
    assert codebook_objective(Codebook(beams[:1], ps), H) == pytest.approx(average_gain(realize(beams[0], ps), H))
    G = np.array([[loop_gain(realize(b, ps), h) for h in H] for b in beams])
    np.testing.assert_array_equal(user_assignment(cb, H), np.argmax(G, axis=0))


def test_objective_monotone_under_addition(rng):
    ps = PhaseSet(2)
    H = random_channels(rng, 30, 4)
    beams = []
    prev = -np.inf
    for _ in range(10):
        beams.append(BeamVector.random(4, ps, rng))
        obj = codebook_objective(Codebook(beams, ps), H)
        assert obj >= prev
        prev = obj


def test_egc_examples(rng):
    h = 0.7 * np.exp(1j * rng.uniform(-np.pi, np.pi, 5))
    assert egc_upper_bound(h) == pytest.approx(5 * 0.49, rel=1e-14)
    assert egc_upper_bound(np.array([3 - 4j])) == pytest.approx(25.0)
    with pytest.raises(ValueError):
        egc_upper_bound(np.zeros(3))


def test_egc_beam_attains_bound(rng):
    # gain is |w^H h|^2, so phase alignment needs w_m = exp(+j arg h_m)/sqrt(M)
    for M in (1, 2, 8, 32):
        h = random_channels(rng, 1, M)[0]
        assert gain(egc_beam(h), h) == pytest.approx(egc_upper_bound(h), rel=1e-12)
    h = random_channels(rng, 1, 8)[0]
    conj_beam = np.exp(-1j * np.angle(h)) / np.sqrt(8)
    assert gain(conj_beam, h) < egc_upper_bound(h)


def test_egc_dominates_random_beams(rng):
    h = random_channels(rng, 1, 6)[0]
    W = np.exp(1j * rng.uniform(-np.pi, np.pi, (100_000, 6))) / np.sqrt(6)
    assert gains_matrix(W, h[None, :]).max() <= egc_upper_bound(h) * (1 + 1e-12)


def test_egc_codebook_ratio_is_one(rng):
    cs = ChannelSet(random_channels(rng, 6, 4))
    bound = np.mean([egc_upper_bound(h) for h in cs.channels])
    assert codebook_objective(egc_codebook(cs), cs) == pytest.approx(bound, rel=1e-12)


def test_beamsteering_examples():
    cb = beamsteering_codebook(8, 1)
    assert cb.labels == [0.0]
    np.testing.assert_allclose(cb.weights()[0], array_response(ArrayGeometry.ideal(8), 0.0) / np.sqrt(8))
    cb = beamsteering_codebook(8, 32)
    assert cb.N == 32 and not cb.quantized
    A = array_response(ArrayGeometry.ideal(8), np.deg2rad(cb.labels))
    for w, a in zip(cb.weights(), A):
        assert gain(w, a) == pytest.approx(8.0, rel=1e-12)
    q = beamsteering_codebook(8, 32, PhaseSet(3))
    assert q.quantized and all(isinstance(b, BeamVector) for b in q.beams)


def test_beamsteering_converges_on_single_path_users(rng):
    geo = ArrayGeometry.ideal(8)
    A = array_response(geo, rng.uniform(0, np.pi, 200))
    ratios = []
    for N in (4, 16, 64, 256):
        ratios.append(codebook_objective(beamsteering_codebook(8, N), A) / 8.0)
    assert np.all(np.diff(ratios) >= 0)
    assert ratios[-1] > 0.99


def test_exhaustive_oracle_examples(rng):
    ps = PhaseSet(3)
    h = random_channels(rng, 1, 1)
    b, g = exhaustive_oracle(h, 1, ps)
    scal = [abs(np.exp(-1j * v) * h[0, 0]) ** 2 for v in ps.values]
    assert b.indices[0] == int(np.argmax(scal)) and g == pytest.approx(max(scal))
    with pytest.raises(ValueError, match="budget"):
        exhaustive_oracle(random_channels(rng, 1, 32), 32, ps)


def test_exhaustive_oracle_enumerates_256(rng):
    ps = PhaseSet(2)
    H = ChannelSet(random_channels(rng, 3, 4))
    vals = {}
    for idx in itertools.product(range(4), repeat=4):
        vals[idx] = average_gain(realize(BeamVector(idx), ps), H)
    assert len(vals) == 256
    best_val = max(vals.values())
    first = min(k for k, v in vals.items() if v >= best_val - 1e-12 * best_val)
    b, g = exhaustive_oracle(H, 4, ps)
    assert tuple(b.indices) == first
    assert g == pytest.approx(best_val, rel=1e-12)
    # chunking does not change the answer
    b2, g2 = exhaustive_oracle(H, 4, ps, chunk=7)
    assert b2 == b and g2 == g


def test_exhaustive_oracle_dominates(rng):
    ps = PhaseSet(2)
    H = ChannelSet(random_channels(rng, 4, 5))
    _, g = exhaustive_oracle(H, 5, ps)
    W = np.array([realize(BeamVector.random(5, ps, rng), ps) for _ in range(1000)])
    assert gains_matrix(W, H.channels).mean(axis=1).max() <= g + 1e-12
    bs = beamsteering_codebook(5, 32, ps).weights()
    assert gains_matrix(bs, H.channels).mean(axis=1).max() <= g + 1e-12


def test_oracle_tie_break_lexicographic():
    # a symmetric channel: the global phase is free, so ties abound
    ps = PhaseSet(2)
    h = np.ones((1, 2))
    b, g = exhaustive_oracle(h, 2, ps)
    assert b.indices.tolist() == [0, 0] and g == pytest.approx(2.0)


def test_beam_pattern(rng):
    geo = ArrayGeometry.ideal(8)
    grid = np.deg2rad(np.linspace(0, 180, 181))
    w = array_response(geo, grid[60]) / np.sqrt(8)
    pat = beam_pattern(w, geo, grid)
    assert np.argmax(pat) == 60 and pat[60] == pytest.approx(8.0)
    w = np.exp(1j * rng.uniform(-np.pi, np.pi, 8)) / np.sqrt(8)
    pat = beam_pattern(w, geo, grid)
    want = [loop_gain(w, array_response(geo, p)) for p in grid[::20]]
    np.testing.assert_allclose(pat[::20], want, rtol=1e-12)
    assert np.all(pat <= 8 + 1e-9)
    imp = sample_impaired_geometry(ImpairmentSpec(8, 0.5, 0.1, 0.3, seed=1))
    assert not np.allclose(beam_pattern(w, imp, grid), pat)
    flat = sample_impaired_geometry(ImpairmentSpec(8, 0.5, 0.0, 0.0, seed=1))
    np.testing.assert_array_equal(beam_pattern(w, flat, grid), pat)
    with pytest.raises(ValueError):
        beam_pattern(w, geo, [])


def test_export_patterns_csv(tmp_path, rng):
    geo = ArrayGeometry.ideal(4)
    W = np.array([realize(BeamVector.random(4, PhaseSet(2), rng), PhaseSet(2)) for _ in range(3)])
    table = export_patterns(tmp_path / "p.csv", W, geo, np.linspace(0, 180, 19))
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["angle_deg", "beam_0", "beam_1", "beam_2"]
    assert len(rows) == 20
    assert float(rows[5][2]) == table[4, 1]


def test_codebook_json_round_trip(tmp_path, rng):
    ps = PhaseSet(3)
    cb = Codebook([BeamVector.random(8, ps, rng) for _ in range(4)], ps)
    cb.save(tmp_path / "cb.json")
    back = Codebook.load(tmp_path / "cb.json")
    assert set(cb.to_dict()) == {"M", "r", "beams"}
    assert back.beams == cb.beams and back.phases == ps
    u = beamsteering_codebook(4, 3)
    u.save(tmp_path / "u.json")
    np.testing.assert_array_equal(Codebook.load(tmp_path / "u.json").weights(), u.weights())
    with pytest.raises(ValueError):
        Codebook.from_dict({"M": 2, "r": 1, "beams": [[0, 2]]})
    with pytest.raises(ValueError):
        Codebook([], ps)
