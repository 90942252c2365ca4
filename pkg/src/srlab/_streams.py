"""Deterministic per-(trajectory, mode) noise streams.

Every trajectory/mode pair owns its own counter-based Philox stream, keyed by
(master seed, trajectory index, mode index).  Results therefore do not depend
on chunking, scheduling, or worker count, and runs at different spectral
cutoffs see identical noise on the modes they share.
"""

from __future__ import annotations

import numpy as np

# Stream namespaces.  Independent consumers of randomness get disjoint kinds
# so that e.g. the scalar reference simulation never reuses field noise.
KIND_FIELD = 0
KIND_ORACLE = 2
KIND_PROBE = 9


def mode_key(k: int) -> int:
    """Fold a signed mode index into a nonnegative key (0,-1,1,-2,2 -> 0,1,2,3,4)."""
    k = int(k)
    return 2 * k if k >= 0 else -2 * k - 1


def mode_stream(master_seed: int, traj_index: int, k: int,
                kind: int = KIND_FIELD) -> np.random.Generator:
    """Generator for the (trajectory, mode) stream of a given master seed."""
    ss = np.random.SeedSequence(
        entropy=int(master_seed),
        spawn_key=(int(kind), int(traj_index), mode_key(k)),
    )
    return np.random.Generator(np.random.Philox(ss))


def trajectory_streams(master_seed: int, traj_index: int, wavenumbers,
                       kind: int = KIND_FIELD) -> list[np.random.Generator]:
    """One stream per mode, ordered like ``wavenumbers``."""
    return [mode_stream(master_seed, traj_index, k, kind) for k in wavenumbers]


def derive_seed(master_seed: int, tag: int) -> int:
    """Derive a child 64-bit seed (used for bisection probes and sweeps)."""
    ss = np.random.SeedSequence(entropy=int(master_seed),
                                spawn_key=(KIND_PROBE, int(tag)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
