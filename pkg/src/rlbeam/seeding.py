import zlib

import numpy as np


def named_seed(master: int, name: str) -> int:
    """Deterministic per-subsystem seed derived from a master seed and a name."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
