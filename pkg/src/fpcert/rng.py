"""Counter-based random streams.

Every stream is a Philox generator keyed by a ``SeedSequence`` built from the
run seed plus a spawn key ``(domain, *indices)``. A domain is a fixed small
integer per consumer, so the stream for e.g. calibration weight sample j is
the same no matter how many other streams were drawn before it or in which
order parallel workers run.
"""

from __future__ import annotations

import numpy as np

DOMAINS = {
    "problem_data": 1,
    "instance": 2,
    "training": 3,
    "calibration": 4,
}

# Instance streams are keyed (split, index) so train, test and warm-start base
# sets never share draws.
SPLITS = {"train": 0, "test": 1, "base": 2}


def stream(seed: int, domain: str, *indices: int) -> np.random.Generator:
    """Independent generator for ``(seed, domain, indices)``."""
    key = (DOMAINS[domain],) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
