"""Counter-based random streams.

Every random draw in samlab comes from a Philox generator keyed by a root seed
plus a tuple of labels (step index, replicate block, purpose...). Streams for
different keys are independent, and a given key always yields the same draws,
regardless of evaluation order or how work is split.
"""

from __future__ import annotations

import zlib

import numpy as np


def _word(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("stream labels must be non-negative")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def generator(seed: int, *labels) -> np.random.Generator:
    """Return the Philox stream for ``(seed, *labels)``."""
    ss = np.random.SeedSequence([_word(seed), len(labels), *(_word(lab) for lab in labels)])
    return np.random.Generator(np.random.Philox(ss))
