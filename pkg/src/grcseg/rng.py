"""Seeded random streams.

All randomness goes through Philox-4x64 (numpy's counter-based generator,
Salmon et al. 2011 constants), so every stream is reproducible across
platforms.  Independent sub-streams are derived from one integer seed by
``SeedSequence(seed, spawn_key=stream)``; ``stream`` is a tuple of small
integers naming the consumer, e.g. ``(STREAM_SCENE, i)`` for scene ``i``.
"""
import numpy as np

STREAM_SCENE = 1
STREAM_WEATHER = 2
STREAM_INIT = 3
STREAM_TRAIN = 4
STREAM_NOISE = 5
STREAM_AUGMENT = 6


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(seq))
