"""Counter-based random streams keyed by (seed, epoch, sample, view).

Augmentation results must not depend on which worker happens to process a
sample, so every draw comes from a Philox generator whose 128-bit key is a
hash of the derivation tuple. Equal keys give identical draws; distinct keys
give independent streams. Per-stage sub-streams add a lane index to the key,
so appending a pipeline stage never perturbs the draws of earlier stages.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Lane-domain constants keep loader plan shuffles, pipeline stages, and other
# consumers in disjoint key spaces even for equal field tuples.
LANE_STAGE = 0x5354414745  # "STAGE"
LANE_PLAN = 0x504C414E  # "PLAN"
LANE_INIT = 0x494E4954  # "INIT"
LANE_DATA = 0x44415441  # "DATA"

# placeholder entropy for Philox construction; the real key is injected into
# the generator state afterwards
_NULL_SEED_SEQUENCE = np.random.SeedSequence(0)


def _mix64(x: int) -> int:
    """splitmix64 finalizer; decorrelates structured integer inputs."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _mix_fields(*fields: int) -> int:
    h = 0x243F6A8885A308D3  # pi fraction, arbitrary nonzero start
    for f in fields:
        h = _mix64(h ^ (int(f) & _MASK64))
    return h


class RngStream:
    """Deterministic stream factory for one (seed, epoch, sample, view) tuple."""

    __slots__ = ("seed", "epoch", "sample", "view")

    def __init__(self, seed: int, epoch: int = 0, sample: int = 0, view: int = 0):
        self.seed = int(seed)
        self.epoch = int(epoch)
        self.sample = int(sample)
        self.view = int(view)

    def key(self, lane: int, domain: int = LANE_STAGE) -> np.ndarray:
        k0 = _mix_fields(domain, self.seed, self.epoch)
        k1 = _mix_fields(domain, self.sample, self.view, lane)
        return np.array([k0, k1], dtype=np.uint64)

    def substream(self, lane: int, domain: int = LANE_STAGE) -> np.random.Generator:
        """Fresh generator for one lane; counter starts at zero every call."""
        # equivalent to Philox(key=...) but skips the per-construction OS
        # entropy pull for the unused default seed sequence (hot path: one
        # stream per stage per view per sample)
        bg = np.random.Philox(seed=_NULL_SEED_SEQUENCE)
        state = bg.state
        state["state"]["key"][:] = self.key(lane, domain)
        state["state"]["counter"][:] = 0
        bg.state = state
        return np.random.Generator(bg)

    def __repr__(self) -> str:
        return (
            f"RngStream(seed={self.seed}, epoch={self.epoch}, "
            f"sample={self.sample}, view={self.view})"
        )


def plan_stream(seed: int, epoch: int) -> np.random.Generator:
    """Generator used for epoch-plan shuffles; independent of sample streams."""
    return RngStream(seed, epoch).substream(0, domain=LANE_PLAN)


def init_stream(seed: int, lane: int = 0) -> np.random.Generator:
    """Generator for parameter initialization and other one-shot setup."""
    return RngStream(seed).substream(lane, domain=LANE_INIT)
