"""Counter-based random number streams for reproducible parallel simulation.

Every random draw in a simulated trial has a fixed address
``(seed, arm_id, purpose, week, subject_index)``: a Philox bit generator is
keyed by the first four fields and the subject index selects a 256-bit
counter block (4 raw 64-bit words) within that stream.  Consequences:

* draws do not depend on execution order, so subject simulations can run
  in parallel or be vectorised without changing results;
* enlarging ``n_per_arm`` leaves the draws of existing subjects untouched;
* the observed and ground-truth regimes of the same scenario share the
  random-effect and residual draws exactly, because those purposes are
  addressed independently of the intercurrent-event draws.

Uniforms are derived from raw words by the usual 53-bit shift (offset into
the open interval so that the normal inverse CDF stays finite); normal
deviates are obtained through ``scipy.special.ndtri``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

# Purpose codes. ETA/EPS/IE address per-subject draws inside a trial
# simulation; GF/CF address counterfactual draws of the estimators.
ETA = 0  # subject random effects (words 0-1 of the block)
EPS = 1  # residual deviate at one observation week (word 0)
IE = 2   # intercurrent-event uniform at one decision week (word 0)
GF = 3   # sequential-standardization counterfactual sampler
CF = 4   # mixed-effects counterfactual sampler

WORDS_PER_BLOCK = 4  # one Philox counter increment

_U64 = np.uint64
_MASK64 = (1 << 64) - 1


def philox(seed: int, arm_id: int = 0, purpose: int = 0, week: int = 0) -> np.random.Philox:
    """Philox bit generator keyed by (seed, arm_id, purpose, week)."""
    if not 0 <= arm_id < 2**32:
        raise ValueError(f"arm_id out of range: {arm_id}")
    if not 0 <= purpose < 2**8:
        raise ValueError(f"purpose out of range: {purpose}")
    if not 0 <= week < 2**8:
        raise ValueError(f"week out of range: {week}")
    key = np.empty(2, dtype=_U64)
    key[0] = _U64(int(seed) & _MASK64)
    key[1] = (_U64(arm_id) << _U64(16)) | (_U64(purpose) << _U64(8)) | _U64(week)
    return np.random.Philox(key=key)


def generator(seed: int, arm_id: int = 0, purpose: int = 0, week: int = 0) -> np.random.Generator:
    """Sequential generator over the keyed stream (for bulk sampler draws)."""
    return np.random.Generator(philox(seed, arm_id, purpose, week))


def raw_blocks(seed: int, arm_id: int, purpose: int, week: int,
               n: int, first: int = 0) -> np.ndarray:
    """Counter blocks ``first .. first+n`` of a stream, as uint64 (n, 4).

    Row ``i`` belongs to subject ``first + i`` and never changes with ``n``.
    """
    bg = philox(seed, arm_id, purpose, week)
    if first:
        bg.advance(first)  # one advance step == one 4-word block
    return bg.random_raw(n * WORDS_PER_BLOCK).reshape(n, WORDS_PER_BLOCK)


def to_uniform(words: np.ndarray) -> np.ndarray:
    """Map raw 64-bit words to doubles in the open interval (0, 1)."""
    return (words >> _U64(11)) * 2.0**-53 + 2.0**-54


def to_normal(words: np.ndarray) -> np.ndarray:
    """Map raw 64-bit words to standard-normal deviates (inverse CDF)."""
    return ndtri(to_uniform(words))


class SubjectStreams:
    """Addressable draws for a single subject.

    Reads the same counter blocks as the vectorised per-arm simulation, so
    a subject simulated alone is bit-identical to the same subject inside
    a full trial.
    """

    def __init__(self, seed: int, arm_id: int, subject_index: int):
        if subject_index < 0:
            raise ValueError("subject_index must be nonnegative")
        self.seed = seed
        self.arm_id = arm_id
        self.subject_index = subject_index

    def _block(self, purpose: int, week: int) -> np.ndarray:
        return raw_blocks(self.seed, self.arm_id, purpose, week, 1,
                          first=self.subject_index)[0]

    def etas(self) -> tuple[float, float]:
        """Standard-normal pair for the subject's random effects."""
        z = to_normal(self._block(ETA, 0)[:2])
        return float(z[0]), float(z[1])

    def eps(self, week: int) -> float:
        """Standard-normal residual deviate for observation week 1..4."""
        if not 1 <= week <= 4:
            raise ValueError(f"observation week out of range: {week}")
        return float(to_normal(self._block(EPS, week)[:1])[0])

    def ie_uniform(self, week: int) -> float:
        """Uniform(0,1) deviate for the intercurrent event at week 1..3."""
        if not 1 <= week <= 3:
            raise ValueError(f"decision week out of range: {week}")
        return float(to_uniform(self._block(IE, week)[:1])[0])
