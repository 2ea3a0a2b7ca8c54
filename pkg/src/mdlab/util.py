"""Seed plumbing and small shared helpers."""

from __future__ import annotations

import json
import math
import zlib
from pathlib import Path

import numpy as np


def substream(seed: int, *keys) -> np.random.Generator:
    """Derive a named RNG stream from a single master seed.

    Keys may be strings or ints; strings are hashed so that e.g.
    substream(seed, "rollout", 3) is stable across runs and independent of
    every other named stream.
    """
    entropy = [int(seed)]
    for k in keys:
        if isinstance(k, str):
            entropy.append(zlib.crc32(k.encode("utf-8")))
        else:
            entropy.append(int(k))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def round_half_away(x: float) -> int:
    """round() with halves away from zero (not banker's rounding)."""
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def write_jsonl(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_jsonl(path) -> list:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
