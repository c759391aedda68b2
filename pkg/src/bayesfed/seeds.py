"""Deterministic random stream derivation.

Every random draw in a run flows from one root seed. Streams are derived
as Philox generators keyed by (root seed, purpose, *path), so any client,
round or repeat gets its own counter-based stream whose output does not
depend on scheduling or thread count.
"""

from __future__ import annotations

from numpy.random import Generator, Philox, SeedSequence

# purpose codes; part of the reproducibility contract, do not renumber
PURPOSE_DATA = 1
PURPOSE_PARTITION = 2
PURPOSE_TEACHER_INIT = 3
PURPOSE_STUDENT_INIT = 4
PURPOSE_CLIENT = 5
PURPOSE_SERVER = 6
PURPOSE_EVAL = 7
PURPOSE_ACTIVE = 8
PURPOSE_OOD = 9


def stream(seed: int, purpose: int, *path: int) -> Generator:
    """Stream fully determined by (seed, purpose, path). path entries are
    small non-negative ints such as client id, round index, repeat index."""
    entropy = [int(seed), int(purpose), *(int(p) for p in path)]
    if any(e < 0 for e in entropy):
        raise ValueError(f"seed path must be non-negative, got {entropy}")
    return Generator(Philox(SeedSequence(entropy)))
