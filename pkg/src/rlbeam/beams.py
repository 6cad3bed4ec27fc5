"""Deterministic beam math for phase-shifter arrays.

Phase-index beams, their complex realization, gains, objectives, the
beamsteering and equal-gain-combining baselines, a brute-force optimizer for
tiny arrays, and angular beam patterns.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .array import ArrayGeometry, array_response
from .channel import ChannelSet

DEFAULT_ORACLE_BUDGET = 2**20


@dataclass(frozen=True)
class PhaseSet:
    """The 2**r phases of an r-bit shifter, -pi + (i+1)*2*pi/2**r for i < 2**r."""

    r: int

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("phase resolution r must be >= 1 bit")

    @property
    def size(self) -> int:
        return 2**self.r

    @cached_property
    def values(self) -> np.ndarray:
        v = -np.pi + (np.arange(self.size) + 1) * (2 * np.pi / self.size)
        v.flags.writeable = False
        return v

    @property
    def step(self) -> float:
        return 2 * np.pi / self.size


class BeamVector:
    """Phase-index vector of a constant-modulus beam."""

    __slots__ = ("indices",)

    def __init__(self, indices):
        idx = np.array(indices, dtype=np.int64).reshape(-1)
        idx.flags.writeable = False
        self.indices = idx

    @property
    def M(self) -> int:
        return self.indices.size

    def phases(self, ps: PhaseSet) -> np.ndarray:
        _check_range(self.indices, ps)
        return ps.values[self.indices]

    def __eq__(self, other):
        return isinstance(other, BeamVector) and np.array_equal(self.indices, other.indices)

    def __hash__(self):
        return hash(self.indices.tobytes())

    def __repr__(self):
        return f"BeamVector({self.indices.tolist()})"

    @classmethod
    def random(cls, M: int, ps: PhaseSet, rng: np.random.Generator) -> "BeamVector":
        return cls(rng.integers(0, ps.size, M))


def _check_range(idx: np.ndarray, ps: PhaseSet) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= ps.size):
        raise ValueError(f"phase index out of range [0, {ps.size})")


def realize(beam: BeamVector, ps: PhaseSet) -> np.ndarray:
    """w = exp(j*theta) / sqrt(M)."""
    return np.exp(1j * beam.phases(ps)) / np.sqrt(beam.M)


def realize_indices(idx: np.ndarray, ps: PhaseSet) -> np.ndarray:
    """Vectorized ``realize`` over the last axis of an index array."""
    idx = np.asarray(idx)
    _check_range(idx, ps)
    return np.exp(1j * ps.values[idx]) / np.sqrt(idx.shape[-1])


def indices_of(w: np.ndarray, ps: PhaseSet) -> BeamVector:
    """Inverse of ``realize`` for weights that lie on the lattice."""
    return quantize_phases(np.angle(np.asarray(w)), ps)


def circular_distance(a, b) -> np.ndarray:
    d = np.abs(np.subtract(a, b)) % (2 * np.pi)
    return np.minimum(d, 2 * np.pi - d)


def quantize_phases(proto, ps: PhaseSet) -> BeamVector:
    """Nearest lattice phase per element, measured around the circle.

    Ties go to the smaller index. With the circular metric a value near -pi
    lands on the pi entry, which is the same point on the unit circle.
    """
    proto = np.asarray(proto, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(proto)):
        raise ValueError("proto-action contains non-finite entries")
    d = circular_distance(proto[:, None], ps.values[None, :])
    return BeamVector(np.argmin(d, axis=1))


def _as_weights(w) -> np.ndarray:
    return np.asarray(w, dtype=np.complex128)


def gain(w, h) -> float:
    """|w^H h|^2."""
    w, h = _as_weights(w), np.asarray(h, dtype=np.complex128)
    if w.shape != h.shape:
        raise ValueError(f"dimension mismatch: w{w.shape} vs h{h.shape}")
    return float(np.abs(np.vdot(w, h)) ** 2)


def snr(w, h, rho: float) -> float:
    if rho <= 0:
        raise ValueError("rho must be positive")
    return gain(w, h) * rho


def gains_matrix(W, H) -> np.ndarray:
    """(N, K) matrix of |w_n^H h_k|^2 for weight rows W and channel rows H."""
    W = np.atleast_2d(_as_weights(W))
    H = np.atleast_2d(np.asarray(H, dtype=np.complex128))
    if W.shape[1] != H.shape[1]:
        raise ValueError(f"dimension mismatch: M={W.shape[1]} vs M={H.shape[1]}")
    return np.abs(W.conj() @ H.T) ** 2


def _channels(cs) -> np.ndarray:
    return cs.channels if isinstance(cs, ChannelSet) else np.atleast_2d(cs)


def average_gain(w, cs: Union[ChannelSet, np.ndarray]) -> float:
    H = _channels(cs)
    if H.shape[0] == 0:
        raise ValueError("empty channel set")
    return float(gains_matrix(w, H)[0].mean())


@dataclass
class Codebook:
    """A set of beams.

    Learned codebooks hold ``BeamVector`` entries together with their
    ``PhaseSet``; baselines with unquantized phases hold complex unit vectors
    and set ``quantized=False``.
    """

    beams: list
    phases: Optional[PhaseSet] = None
    quantized: bool = True
    labels: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.beams) == 0:
            raise ValueError("codebook needs at least one beam")
        if self.quantized and self.phases is None:
            raise ValueError("quantized codebook needs a PhaseSet")
        Ms = {b.M if isinstance(b, BeamVector) else np.size(b) for b in self.beams}
        if len(Ms) != 1:
            raise ValueError("all beams must share M")

    @property
    def N(self) -> int:
        return len(self.beams)

    @property
    def M(self) -> int:
        b = self.beams[0]
        return b.M if isinstance(b, BeamVector) else np.size(b)

    def weights(self) -> np.ndarray:
        if self.quantized:
            return np.array([realize(b, self.phases) for b in self.beams])
        return np.array([_as_weights(b) for b in self.beams])

    def to_dict(self) -> dict:
        if self.quantized:
            return {
                "M": self.M,
                "r": self.phases.r,
                "beams": [b.indices.tolist() for b in self.beams],
            }
        W = self.weights()
        return {
            "M": self.M,
            "r": None,
            "unquantized": True,
            "weights": [[[z.real, z.imag] for z in row] for row in W],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Codebook":
        if d.get("unquantized"):
            W = [np.array([complex(a, b) for a, b in row]) for row in d["weights"]]
            return cls(W, None, quantized=False)
        ps = PhaseSet(int(d["r"]))
        beams = [BeamVector(b) for b in d["beams"]]
        if any(b.M != int(d["M"]) for b in beams):
            raise ValueError("beam length does not match M")
        for b in beams:
            _check_range(b.indices, ps)
        return cls(beams, ps)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Codebook":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _cb_weights(cb) -> np.ndarray:
    return cb.weights() if isinstance(cb, Codebook) else np.atleast_2d(_as_weights(cb))


def user_assignment(cb, cs) -> np.ndarray:
    """Index of the best beam for each user (first on ties)."""
    return np.argmax(gains_matrix(_cb_weights(cb), _channels(cs)), axis=0)


def codebook_objective(cb, cs) -> float:
    """Mean over users of the best beam gain in the codebook."""
    H = _channels(cs)
    if H.shape[0] == 0:
        raise ValueError("empty channel set")
    return float(gains_matrix(_cb_weights(cb), H).max(axis=0).mean())


def egc_beam(h) -> np.ndarray:
    """Unquantized phase-aligned beam, w_m = exp(j*arg h_m)/sqrt(M)."""
    h = np.asarray(h, dtype=np.complex128)
    return np.exp(1j * np.angle(h)) / np.sqrt(h.size)


def egc_upper_bound(h) -> float:
    """(sum_m |h_m|)^2 / M, the best gain of any constant-modulus combiner."""
    h = np.asarray(h, dtype=np.complex128)
    if not np.any(h):
        raise ValueError("EGC bound undefined for a zero channel")
    return float(np.sum(np.abs(h)) ** 2 / h.size)


def egc_codebook(cs: ChannelSet) -> Codebook:
    return Codebook([egc_beam(h) for h in cs.channels], None, quantized=False)


def steering_angles(N: int) -> np.ndarray:
    if N < 1:
        raise ValueError("N must be >= 1")
    return np.linspace(0.0, np.pi, N)


def beamsteering_codebook(M: int, N: int, phases: Optional[PhaseSet] = None) -> Codebook:
    """Matched filters of the ideal half-wavelength ULA at N angles spanning [0, pi].

    With ``phases`` given, each beam's element phases are quantized onto the
    lattice; otherwise the beams stay unquantized.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    angles = steering_angles(N)
    A = array_response(ArrayGeometry.ideal(M), angles) / np.sqrt(M)
    labels = [float(np.rad2deg(a)) for a in angles]
    if phases is None:
        return Codebook(list(A), None, quantized=False, labels=labels)
    return Codebook([quantize_phases(np.angle(a), phases) for a in A], phases, labels=labels)


def exhaustive_oracle(
    cs, M: int, ps: PhaseSet, budget: int = DEFAULT_ORACLE_BUDGET, chunk: int = 4096
) -> tuple[BeamVector, float]:
    """Best lattice beam for the average-gain objective by full enumeration.

    Enumeration is lexicographic over index tuples; among beams whose gain is
    within 1e-12 (relative) of the maximum, the lexicographically smallest is
    returned, so the answer does not depend on ``chunk``.
    """
    total = ps.size**M
    if total > budget:
        raise ValueError(f"search space {ps.size}^{M} = {total:.3g} exceeds budget {budget}")
    H = _channels(cs)
    if H.shape[0] == 0:
        raise ValueError("empty channel set")
    if H.shape[1] != M:
        raise ValueError("dimension mismatch between channels and M")
    values = np.empty(total)
    place = ps.size ** np.arange(M - 1, -1, -1, dtype=np.int64)
    for start in range(0, total, chunk):
        flat = np.arange(start, min(start + chunk, total), dtype=np.int64)
        idx = (flat[:, None] // place) % ps.size
        values[flat] = gains_matrix(realize_indices(idx, ps), H).mean(axis=1)
    best = values.max()
    pos = int(np.flatnonzero(values >= best - 1e-12 * abs(best))[0])
    digits = np.array(np.unravel_index(pos, (ps.size,) * M))
    return BeamVector(digits), float(values[pos])


def beam_pattern(w, geometry: ArrayGeometry, grid) -> np.ndarray:
    """|w^H a(phi)|^2 over an angle grid (radians)."""
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise ValueError("angle grid is empty")
    return gains_matrix(w, array_response(geometry, grid))[0]


def export_patterns(
    path, weights: Sequence, geometry: ArrayGeometry, grid_deg: Optional[np.ndarray] = None
) -> np.ndarray:
    """Write ``angle_deg,beam_0,...`` CSV of beam patterns; returns the table."""
    grid_deg = np.linspace(0, 180, 181) if grid_deg is None else np.asarray(grid_deg)
    A = array_response(geometry, np.deg2rad(grid_deg))
    table = gains_matrix(np.atleast_2d(weights), A).T
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["angle_deg"] + [f"beam_{i}" for i in range(table.shape[1])])
        for a, row in zip(grid_deg, table):
            wr.writerow([repr(float(a))] + [repr(float(v)) for v in row])
    return table
