"""Linear antenna array geometry, hardware impairments and array response."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_RESAMPLE_ROUNDS = 1000


@dataclass(frozen=True)
class ArrayGeometry:
    """Antenna positions (in carrier wavelengths) and per-element phase offsets."""

    positions: np.ndarray
    phase_mismatch: np.ndarray = field(default=None)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1)
        if pos.size == 0:
            raise ValueError("array needs at least one antenna")
        mis = (
            np.zeros_like(pos)
            if self.phase_mismatch is None
            else np.array(self.phase_mismatch, dtype=np.float64).reshape(-1)
        )
        if mis.shape != pos.shape:
            raise ValueError("positions and phase_mismatch must have the same length")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(mis))):
            raise ValueError("geometry entries must be finite")
        if np.any(np.diff(pos) <= 0):
            raise ValueError("antenna positions must be strictly increasing")
        pos.flags.writeable = False
        mis.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "phase_mismatch", mis)

    @property
    def M(self) -> int:
        return self.positions.size

    @classmethod
    def ideal(cls, M: int, spacing: float = 0.5) -> "ArrayGeometry":
        if M < 1:
            raise ValueError("M must be >= 1")
        return cls(np.arange(M) * spacing, np.zeros(M))

    @property
    def is_ideal(self) -> bool:
        ref = np.arange(self.M) * 0.5
        return bool(np.array_equal(self.positions, ref) and not np.any(self.phase_mismatch))

    def fingerprint(self) -> str:
        """Short stable identifier used to tie channel sets to a geometry."""
        import hashlib

        h = hashlib.sha1(self.positions.tobytes() + self.phase_mismatch.tobytes())
        return h.hexdigest()[:12]

    def to_dict(self) -> dict:
        return {
            "positions": self.positions.tolist(),
            "phase_mismatch": self.phase_mismatch.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArrayGeometry":
        return cls(d["positions"], d.get("phase_mismatch"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "ArrayGeometry":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other):
        if not isinstance(other, ArrayGeometry):
            return NotImplemented
        return np.array_equal(self.positions, other.positions) and np.array_equal(
            self.phase_mismatch, other.phase_mismatch
        )

    __hash__ = None


@dataclass(frozen=True)
class ImpairmentSpec:
    M: int
    spacing: float = 0.5
    sigma_d: float = 0.0
    sigma_p: float = 0.0
    seed: int = 0


def sample_impaired_geometry(spec: ImpairmentSpec) -> ArrayGeometry:
    """Draw a fixed random realization of an impaired linear array.

    Position m is Normal((m-1)*spacing, sigma_d^2) and phase mismatch m is
    Normal(0, sigma_p^2). A draw that violates strict position ordering is
    discarded as a whole and redrawn; the phase draw is independent of the
    position retries, so sweeping ``sigma_p`` at a fixed seed only rescales the
    same mismatch pattern.
    """
    if spec.M < 1:
        raise ValueError("M must be >= 1")
    if spec.sigma_d < 0 or spec.sigma_p < 0:
        raise ValueError("standard deviations must be nonnegative")
    pos_rng, phase_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2)
    )
    nominal = np.arange(spec.M) * spec.spacing
    for _ in range(MAX_RESAMPLE_ROUNDS):
        positions = nominal + spec.sigma_d * pos_rng.standard_normal(spec.M)
        if np.all(np.diff(positions) > 0):
            break
    else:
        raise ValueError(
            f"no monotone position draw in {MAX_RESAMPLE_ROUNDS} rounds; "
            f"sigma_d={spec.sigma_d} too large for spacing={spec.spacing}"
        )
    mismatch = spec.sigma_p * phase_rng.standard_normal(spec.M)
    return ArrayGeometry(positions, mismatch)


def array_response(geometry: ArrayGeometry, phi) -> np.ndarray:
    """Array response a(phi) with element m = exp(j(2*pi*d_m*cos(phi) + dtheta_m)).

    ``phi`` may be a scalar (returns shape (M,)) or an array of angles (returns
    shape (len(phi), M)). Angles outside [0, pi] are accepted; they fold onto
    that range through the cosine.
    """
    phi = np.asarray(phi, dtype=np.float64)
    phase = 2 * np.pi * np.multiply.outer(np.cos(phi), geometry.positions)
    return np.exp(1j * (phase + geometry.phase_mismatch))
