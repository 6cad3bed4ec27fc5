"""Geometric channels: synthesis, synthetic scenarios, file I/O and normalization."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .array import ArrayGeometry, array_response

MAGIC = b"BFCH"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class PathComponent:
    gain: complex
    aoa: float

    def __post_init__(self):
        if not np.isfinite(complex(self.gain)):
            raise ValueError("path gain must be finite")
        if not np.isfinite(self.aoa):
            raise ValueError("path angle must be finite")


@dataclass(frozen=True)
class ChannelSet:
    """Immutable (K, M) block of user channels."""

    channels: np.ndarray
    geometry_id: Optional[str] = None
    normalization: Optional[float] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        h = np.array(self.channels, dtype=np.complex128)
        if h.ndim == 1:
            h = h[None, :]
        if h.ndim != 2:
            raise ValueError("channels must be a (K, M) array")
        h.flags.writeable = False
        object.__setattr__(self, "channels", h)

    @property
    def K(self) -> int:
        return self.channels.shape[0]

    @property
    def M(self) -> int:
        return self.channels.shape[1]

    def __len__(self):
        return self.K

    def subset(self, idx) -> "ChannelSet":
        idx = np.asarray(idx)
        return ChannelSet(self.channels[idx], self.geometry_id, self.normalization)

    def __eq__(self, other):
        if not isinstance(other, ChannelSet):
            return NotImplemented
        return (
            self.channels.shape == other.channels.shape
            and np.array_equal(self.channels, other.channels)
            and self.geometry_id == other.geometry_id
            and self.normalization == other.normalization
        )

    __hash__ = None


def synthesize_channel(geometry: ArrayGeometry, paths: Sequence[PathComponent]) -> np.ndarray:
    """h = sum_l alpha_l * a(phi_l)."""
    if len(paths) == 0:
        raise ValueError("at least one path is required")
    gains = np.array([complex(p.gain) for p in paths])
    angles = np.array([p.aoa for p in paths], dtype=np.float64)
    return gains @ array_response(geometry, angles)


@dataclass
class ScenarioParams:
    """Knobs of the synthetic scenario generator. Angles are in degrees."""

    spans: list = field(default_factory=lambda: [[30.0, 150.0]])
    n_paths: int = 5
    weak_power_db: tuple = (-25.0, -15.0)
    gain_db: tuple = (-6.0, 0.0)
    reflectors: list = field(default_factory=lambda: [50.0, 130.0])
    reflector_spread: float = 3.0
    nlos_power_db: tuple = (-3.0, 0.0)


def _random_phase(rng, n=None):
    return np.exp(1j * rng.uniform(-np.pi, np.pi, n))


def generate_scenario(
    kind: str,
    geometry: ArrayGeometry,
    K: int,
    seed: int,
    params: Optional[ScenarioParams] = None,
) -> ChannelSet:
    """Synthetic stand-in for a ray-traced user grid.

    LOS: one dominant path per user with AoA drawn uniformly from one of
    ``params.spans`` (chosen uniformly), plus 0..L-1 weak paths at random angles
    whose power is within ``weak_power_db`` relative to the dominant one.

    NLOS: 2..L paths per user of comparable power, each scattered around one of
    the shared ``params.reflectors`` angles; the first paths cycle through the
    reflectors so every user sees all of them when it has enough paths.
    """
    params = params or ScenarioParams()
    kind = kind.upper()
    if K < 1:
        raise ValueError("user count K must be >= 1")
    if params.n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    rng = np.random.default_rng(seed)
    users = []
    if kind == "LOS":
        spans = [tuple(map(float, s)) for s in params.spans]
        if not spans or any(hi < lo for lo, hi in spans):
            raise ValueError("angular span is empty")
        for _ in range(K):
            lo, hi = spans[rng.integers(len(spans))]
            amp = 10 ** (rng.uniform(*params.gain_db) / 20)
            paths = [PathComponent(amp * _random_phase(rng), np.deg2rad(rng.uniform(lo, hi)))]
            n_weak = int(rng.integers(0, params.n_paths))
            for _ in range(n_weak):
                rel = 10 ** (rng.uniform(*params.weak_power_db) / 20)
                paths.append(
                    PathComponent(amp * rel * _random_phase(rng), rng.uniform(0, np.pi))
                )
            users.append(synthesize_channel(geometry, paths))
    elif kind == "NLOS":
        refl = [float(a) for a in params.reflectors]
        if not refl:
            raise ValueError("NLOS scenario needs at least one reflector angle")
        lo_paths = min(2, params.n_paths)
        for _ in range(K):
            n = int(rng.integers(lo_paths, params.n_paths + 1))
            amp = 10 ** (rng.uniform(*params.gain_db) / 20)
            paths = []
            for i in range(n):
                centre = refl[i % len(refl)] if i < len(refl) else refl[rng.integers(len(refl))]
                ang = np.clip(centre + params.reflector_spread * rng.standard_normal(), 0, 180)
                rel = 10 ** (rng.uniform(*params.nlos_power_db) / 20)
                paths.append(PathComponent(amp * rel * _random_phase(rng), np.deg2rad(ang)))
            users.append(synthesize_channel(geometry, paths))
    else:
        raise ValueError(f"unknown scenario kind {kind!r}")
    return ChannelSet(
        np.array(users), geometry.fingerprint(), None, {"kind": kind, "seed": seed}
    )


def normalize(cs: ChannelSet) -> tuple[ChannelSet, float]:
    """Divide every channel by the largest element magnitude in the set."""
    if cs.K == 0:
        raise ValueError("empty channel set")
    delta = float(np.max(np.abs(cs.channels)))
    if delta == 0.0:
        raise ValueError("cannot normalize an all-zero channel set")
    prior = cs.normalization if cs.normalization is not None else 1.0
    return ChannelSet(cs.channels / delta, cs.geometry_id, prior * delta, cs.meta), delta


def _validate(h: np.ndarray) -> None:
    bad = ~np.isfinite(h)
    if bad.any():
        user = int(np.argwhere(bad)[0][0])
        raise ValueError(f"non-finite channel entry for user {user}")


def save_channels(cs: ChannelSet, path) -> None:
    """Write the binary format, or JSON when the path ends in ``.json``."""
    path = Path(path)
    if path.suffix == ".json":
        doc = {
            "magic": MAGIC.decode(),
            "version": FORMAT_VERSION,
            "M": cs.M,
            "K": cs.K,
            "channels": [[[z.real, z.imag] for z in row] for row in cs.channels],
        }
        if cs.geometry_id is not None:
            doc["geometry_id"] = cs.geometry_id
        if cs.normalization is not None:
            doc["normalization"] = cs.normalization
        path.write_text(json.dumps(doc))
        return
    body = np.ascontiguousarray(cs.channels, dtype="<c16").tobytes()
    path.write_bytes(_HEADER.pack(MAGIC, FORMAT_VERSION, cs.M, cs.K) + body)


def load_channels(path) -> ChannelSet:
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        if doc.get("magic") != MAGIC.decode() or doc.get("version") != FORMAT_VERSION:
            raise ValueError("malformed header: bad magic or version")
        M, K = int(doc["M"]), int(doc["K"])
        rows = doc["channels"]
        if len(rows) != K:
            raise ValueError(f"header says K={K} but file has {len(rows)} users")
        h = np.empty((K, M), dtype=np.complex128)
        for u, row in enumerate(rows):
            if len(row) != M:
                raise ValueError(f"user {u} has {len(row)} entries, expected M={M}")
            h[u] = [complex(re, im) for re, im in row]
        _validate(h)
        return ChannelSet(h, doc.get("geometry_id"), doc.get("normalization"))

    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("malformed header: file too short")
    magic, version, M, K = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise ValueError("malformed header: bad magic or version")
    if M < 1:
        raise ValueError("malformed header: M must be >= 1")
    expected = _HEADER.size + 16 * M * K
    if len(raw) != expected:
        raise ValueError(
            f"inconsistent vector lengths: expected {expected} bytes for K={K}, M={M}, got {len(raw)}"
        )
    h = np.frombuffer(raw, dtype="<c16", offset=_HEADER.size).reshape(K, M).astype(np.complex128)
    _validate(h)
    return ChannelSet(h)
