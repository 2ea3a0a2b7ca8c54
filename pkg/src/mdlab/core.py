"""Vocabulary, token sequences, and denoising trajectories.

Everything here is immutable after construction and safe to share across
worker threads/processes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

MASK_RENDER = "[M]"

MASK_SYMBOL = "<mask>"
PAD_SYMBOL = "<pad>"
ANS_OPEN = "<ans>"
ANS_CLOSE = "</ans>"

# Letters used by the task prompt templates ("nums:", "target:").
_TEMPLATE_LETTERS = "acegmnrstu"

DEFAULT_SYMBOLS = (
    list("0123456789")
    + list("+-*/()=")
    + [" ", ":", ","]
    + list(_TEMPLATE_LETTERS)
    + [ANS_OPEN, ANS_CLOSE, PAD_SYMBOL, MASK_SYMBOL]
)


class UnknownSymbol(ValueError):
    """Raised when encoding hits a character outside the vocabulary."""

    def __init__(self, position: int, text: str):
        self.position = position
        super().__init__(f"unknown symbol at position {position}: {text[position:position + 8]!r}")


class TrajectoryInvariantError(AssertionError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Closed, tiny vocabulary. Symbols may span several characters
    (answer delimiters and the mask/pad specials)."""

    symbols: tuple[str, ...]
    mask_id: int
    pad_id: int

    @classmethod
    def default(cls) -> "Vocab":
        symbols = tuple(DEFAULT_SYMBOLS)
        return cls(
            symbols=symbols,
            mask_id=symbols.index(MASK_SYMBOL),
            pad_id=symbols.index(PAD_SYMBOL),
        )

    def __post_init__(self):
        if self.mask_id == self.pad_id:
            raise ValueError("mask and pad must be distinct symbols")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")

    @property
    def size(self) -> int:
        return len(self.symbols)

    def id_of(self, symbol: str) -> int:
        return self.symbols.index(symbol)

    def _tables(self):
        # longest-match-first lookup table, built lazily and cached
        table = getattr(self, "_table", None)
        if table is None:
            table = {s: i for i, s in enumerate(self.symbols)}
            object.__setattr__(self, "_table", table)
            object.__setattr__(self, "_max_sym_len", max(len(s) for s in self.symbols))
        return table, getattr(self, "_max_sym_len")

    def encode(self, text: str, prompt_len: int = 0) -> "TokenSeq":
        """Greedy longest-match tokenization. prompt_len counts tokens."""
        table, max_len = self._tables()
        ids = []
        i = 0
        while i < len(text):
            for l in range(min(max_len, len(text) - i), 0, -1):
                tok = table.get(text[i:i + l])
                if tok is not None:
                    ids.append(tok)
                    i += l
                    break
            else:
                raise UnknownSymbol(i, text)
        return TokenSeq(ids=tuple(ids), prompt_len=prompt_len)

    def decode(self, seq: "TokenSeq") -> str:
        return self.decode_ids(seq.ids)

    def decode_ids(self, ids: Iterable[int]) -> str:
        """Render ids to text. Mask ids show as the fixed placeholder [M];
        everything from the first pad id on renders as an empty suffix."""
        parts = []
        for tok in ids:
            if tok == self.pad_id:
                break
            if tok == self.mask_id:
                parts.append(MASK_RENDER)
            else:
                parts.append(self.symbols[tok])
        return "".join(parts)


@dataclass(frozen=True)
class TokenSeq:
    """Fixed-length id sequence with a prompt/response boundary."""

    ids: tuple[int, ...]
    prompt_len: int = 0

    def __post_init__(self):
        if not (0 <= self.prompt_len <= len(self.ids)):
            raise ValueError(f"prompt_len {self.prompt_len} out of range for {len(self.ids)} ids")

    @property
    def response_len(self) -> int:
        return len(self.ids) - self.prompt_len

    @property
    def response_ids(self) -> tuple[int, ...]:
        return self.ids[self.prompt_len:]

    def with_response(self, response_ids) -> "TokenSeq":
        return TokenSeq(ids=self.ids[: self.prompt_len] + tuple(response_ids), prompt_len=self.prompt_len)


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "lcr"  # rr | lcr | rcr  ("lcr-frozen" accepted as alias of lcr)
    schedule: str = "linear"
    block_size: int = 0  # 0 or >= response_len means pure-Diff
    steps: int = 16
    response_len: int = 16
    temperature: float = 0.0
    seed: int = 0

    def normalized_strategy(self) -> str:
        s = self.strategy.lower()
        if s == "lcr-frozen":
            return "lcr"
        return s

    def effective_block(self) -> int:
        if self.block_size <= 0 or self.block_size >= self.response_len:
            return self.response_len
        return self.block_size

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "schedule": self.schedule,
            "block_size": self.block_size,
            "steps": self.steps,
            "response_len": self.response_len,
            "temperature": self.temperature,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class TrajectoryStep:
    """One predict-then-remask iteration, recorded at countdown index t.

    masked_ids is the model input x̄_t; predicted_ids the full prediction
    x_{t-1}. confidence/running_confidence cover the response region only.
    """

    t: int
    masked_ids: tuple[int, ...]
    predicted_ids: tuple[int, ...]
    confidence: tuple[float, ...]
    running_confidence: tuple[float, ...]


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[TrajectoryStep, ...]
    config: DecodeConfig
    seed: int
    prompt_len: int

    @property
    def total_steps(self) -> int:
        return len(self.steps)

    def final_ids(self) -> tuple[int, ...]:
        return self.steps[-1].predicted_ids

    def prediction_at(self, t: int) -> tuple[int, ...]:
        """Full prediction x_t for 0 <= t < total_steps (the record at
        countdown index t+1 holds x_t)."""
        return self.steps[self.total_steps - 1 - t].predicted_ids


def validate_trajectory(traj: Trajectory, mask_id: int) -> None:
    """Assert the recorded-run invariants; raises TrajectoryInvariantError."""
    if not traj.steps:
        raise TrajectoryInvariantError("empty trajectory")
    p = traj.prompt_len
    L = len(traj.steps[0].masked_ids) - p

    def n_masked(ids):
        return sum(1 for tok in ids[p:] if tok == mask_id)

    if n_masked(traj.steps[0].masked_ids) != L:
        raise TrajectoryInvariantError("first step input is not fully masked")
    if n_masked(traj.steps[-1].predicted_ids) != 0:
        raise TrajectoryInvariantError("final prediction still contains masks")

    prev_count = None
    prev_running = None
    prev_t = None
    for step in traj.steps:
        if any(tok == mask_id for tok in step.masked_ids[:p]):
            raise TrajectoryInvariantError("prompt position masked")
        count = n_masked(step.masked_ids)
        if prev_count is not None and count > prev_count:
            raise TrajectoryInvariantError("masked count increased as t decreased")
        if prev_t is not None and step.t != prev_t - 1:
            raise TrajectoryInvariantError("step indices are not a strict countdown")
        if prev_running is not None:
            for a, b in zip(prev_running, step.running_confidence):
                if b < a - 1e-12:
                    raise TrajectoryInvariantError("running confidence decreased")
        for c in step.confidence:
            if not (0.0 <= c <= 1.0 + 1e-9):
                raise TrajectoryInvariantError("confidence outside [0, 1]")
        prev_count = count
        prev_running = step.running_confidence
        prev_t = step.t


def trajectory_to_jsonl(traj: Trajectory, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        header = {
            "config": traj.config.to_dict(),
            "seed": traj.seed,
            "prompt_len": traj.prompt_len,
        }
        f.write(json.dumps({"meta": header}) + "\n")
        for step in traj.steps:
            f.write(json.dumps({
                "t": step.t,
                "masked_ids": list(step.masked_ids),
                "predicted_ids": list(step.predicted_ids),
                "confidence": [round(c, 8) for c in step.confidence],
                "running_confidence": [round(c, 8) for c in step.running_confidence],
            }) + "\n")


def trajectory_from_jsonl(path) -> Trajectory:
    with open(path, "r", encoding="utf-8") as f:
        lines = [json.loads(line) for line in f if line.strip()]
    meta = lines[0]["meta"]
    steps = tuple(
        TrajectoryStep(
            t=rec["t"],
            masked_ids=tuple(rec["masked_ids"]),
            predicted_ids=tuple(rec["predicted_ids"]),
            confidence=tuple(rec["confidence"]),
            running_confidence=tuple(rec["running_confidence"]),
        )
        for rec in lines[1:]
    )
    return Trajectory(
        steps=steps,
        config=DecodeConfig(**meta["config"]),
        seed=meta["seed"],
        prompt_len=meta["prompt_len"],
    )
