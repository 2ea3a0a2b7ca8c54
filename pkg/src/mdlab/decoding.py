"""Iterative denoising: schedules, masking scores, remasking, decode loops.

Time convention: t counts down from T (fully masked) to 0 (fully
committed). The masked fraction at step t is rho(t/T) with rho(1)=1 and
rho(0)=0, so the number of masked response tokens shrinks monotonically
over a run. The published schedule formulas index time the other way
round; they are applied here with a reversed argument so that every
schedule starts fully masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import DecodeConfig, TokenSeq, Trajectory, TrajectoryStep, Vocab
from .model import MaskPredictor
from .util import round_half_away, substream

NEG_INF = float("-inf")


class UnknownSchedule(ValueError):
    pass


class ConfigError(ValueError):
    pass


class InsufficientCandidates(ValueError):
    pass


def _rho_linear(u):
    return u


def _rho_cosine(u):
    return (1.0 - math.cos(math.pi * u)) / 2.0


def _rho_square(u):
    return 1.0 - (1.0 - u) ** 2


def _rho_cubic(u):
    return 1.0 - (1.0 - u) ** 3


def _rho_exponential(u):
    return (math.e - math.exp(1.0 - u)) / (math.e - 1.0)


def _rho_sqrt(u):
    return 1.0 - math.sqrt(1.0 - u)


def _rho_log(u):
    return 1.0 - math.log(2.0 - u) / math.log(2.0)


SCHEDULES = {
    "linear": _rho_linear,
    "cosine": _rho_cosine,
    "square": _rho_square,
    "cubic": _rho_cubic,
    "exponential": _rho_exponential,
    "sqrt": _rho_sqrt,
    "log": _rho_log,
}


@dataclass(frozen=True)
class Schedule:
    name: str
    T: int
    L: int

    def __post_init__(self):
        if self.name not in SCHEDULES:
            raise UnknownSchedule(self.name)
        if self.T < 1 or self.L < 1:
            raise ConfigError(f"bad schedule dims T={self.T} L={self.L}")

    def masked_count(self, t: int) -> int:
        """n_t: number of masked positions after the step at countdown
        index t. Endpoints n_T = L and n_0 = 0 are forced."""
        if not (0 <= t <= self.T):
            raise ConfigError(f"step {t} outside [0, {self.T}]")
        if t == self.T:
            return self.L
        if t == 0:
            return 0
        rho = SCHEDULES[self.name]
        return min(self.L, max(0, round_half_away(rho(t / self.T) * self.L)))


def masked_count(schedule: Schedule, t: int) -> int:
    return schedule.masked_count(t)


# ---------------------------------------------------------------------------
# Masking scores (per response region; length L arrays)

@dataclass
class ScoreState:
    """Per-trajectory remasking state over the response region."""

    strategy: str  # rr | lcr | rcr
    L: int
    rng: np.random.Generator
    conf: np.ndarray = None  # current confidence c[i]
    running: np.ndarray = None  # running max confidence
    frozen: np.ndarray = None  # committed & ineligible (rr/lcr only)
    finalized: np.ndarray = None  # completed semi-AR blocks (all strategies)

    def __post_init__(self):
        if self.strategy not in ("rr", "lcr", "rcr"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.conf is None:
            self.conf = np.zeros(self.L)
        if self.running is None:
            self.running = np.zeros(self.L)
        if self.frozen is None:
            self.frozen = np.zeros(self.L, dtype=bool)
        if self.finalized is None:
            self.finalized = np.zeros(self.L, dtype=bool)

    def observe(self, predicted: np.ndarray, confidences: np.ndarray) -> None:
        """Record a prediction event at the positions masked this step."""
        self.conf[predicted] = confidences[predicted]
        self.running[predicted] = np.maximum(self.running[predicted], confidences[predicted])

    def commit(self, predicted: np.ndarray, remasked: np.ndarray) -> None:
        """After remasking: positions predicted this step that stayed
        unmasked become frozen under rr/lcr; rcr keeps them revisable."""
        if self.strategy in ("rr", "lcr"):
            self.frozen |= predicted & ~remasked

    def finalize(self, positions: np.ndarray) -> None:
        self.finalized |= positions


def masking_scores(state: ScoreState, predicted: np.ndarray) -> np.ndarray:
    """Scores m[i] over the response region; highest scores get remasked.

    `predicted` flags the positions that received a prediction this step
    (i.e. the positions masked in the model input). state.observe() must
    have been called for this step already.
    """
    m = np.full(state.L, NEG_INF)
    if state.strategy == "rr":
        eligible = predicted & ~state.frozen & ~state.finalized
        m[eligible] = state.rng.uniform(0.0, 1.0, size=int(eligible.sum()))
    elif state.strategy == "lcr":
        eligible = predicted & ~state.frozen & ~state.finalized
        m[eligible] = 1.0 - state.conf[eligible]
    else:  # rcr: every non-finalized position that has ever been predicted
        eligible = ~state.finalized & (state.running > 0.0)
        m[eligible] = 1.0 - state.running[eligible]
    return m


def remask(response_ids: np.ndarray, scores: np.ndarray, n_t: int, mask_id: int) -> np.ndarray:
    """Mask exactly the n_t highest-scoring response positions.

    Ties break toward the lower position index. Returns the new response
    id array; input is not modified.
    """
    out = response_ids.copy()
    if n_t == 0:
        return out
    finite = np.isfinite(scores)
    if int(finite.sum()) < n_t:
        raise InsufficientCandidates(f"need {n_t} candidates, have {int(finite.sum())}")
    order = np.lexsort((np.arange(len(scores)), -scores))
    chosen = order[:n_t]
    out[chosen] = mask_id
    return out


# ---------------------------------------------------------------------------
# Sampling

def sample_tokens(probs: np.ndarray, temperature: float, rng: np.random.Generator):
    """Draw one token per row of probs [n, V].

    temperature 0 is argmax; otherwise categorical over
    softmax(log p / temperature). Returns (tokens, confidence) where
    confidence is the untempered probability of the drawn token.
    """
    if temperature == 0.0:
        tokens = probs.argmax(axis=1)
    else:
        logits = np.log(np.clip(probs, 1e-30, None)) / temperature
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        u = rng.random(size=probs.shape[0])
        tokens = (p.cumsum(axis=1) < u[:, None]).sum(axis=1)
        tokens = np.clip(tokens, 0, probs.shape[1] - 1)
    conf = probs[np.arange(probs.shape[0]), tokens]
    return tokens.astype(np.int64), conf


def predictive_probs(probs: np.ndarray, mask_id: int) -> np.ndarray:
    """Zero out the mask symbol and renormalize: the mask is an input-only
    corruption symbol, never a legal prediction."""
    out = probs.copy()
    out[..., mask_id] = 0.0
    out /= out.sum(axis=-1, keepdims=True)
    return out


def denoise_step(model: MaskPredictor, xbar: TokenSeq, temperature: float,
                 rng: np.random.Generator, vocab: Vocab):
    """One prediction pass: fill every masked position of xbar.

    Returns (fully unmasked TokenSeq, confidence over the response region).
    Unmasked positions are copied through.
    """
    ids = np.array(xbar.ids, dtype=np.int64)
    masked = ids == vocab.mask_id
    if not masked.any():
        raise ConfigError("denoise_step requires at least one masked position")
    with torch.no_grad():
        logits = model(torch.from_numpy(ids).unsqueeze(0))
        probs = predictive_probs(
            F.softmax(logits[0], dim=-1).double().numpy(), vocab.mask_id)
    tokens, conf = sample_tokens(probs[masked], temperature, rng)
    out = ids.copy()
    out[masked] = tokens
    full_conf = np.zeros(len(ids))
    full_conf[masked] = conf
    p = xbar.prompt_len
    return TokenSeq(ids=tuple(int(i) for i in out), prompt_len=p), full_conf[p:]


# ---------------------------------------------------------------------------
# Decode loops

def _block_plan(cfg: DecodeConfig):
    """[(lo, hi, budget)] over response indices; pure-Diff is one block."""
    L, T = cfg.response_len, cfg.steps
    if L < 1:
        raise ConfigError("response_len must be positive")
    B = cfg.effective_block()
    if T < math.ceil(L / B):
        raise ConfigError(f"steps {T} too small for L={L}, B={B}")
    if B == L:
        return [(0, L, T)]
    plan = []
    lo = 0
    while lo < L:
        hi = min(lo + B, L)
        budget = max(1, (T * (hi - lo)) // L)
        plan.append((lo, hi, budget))
        lo = hi
    return plan


def decode(model: MaskPredictor, prompt_ids, cfg: DecodeConfig, vocab: Vocab,
           seed: int | None = None) -> Trajectory:
    """Run one full denoising trajectory for a single prompt."""
    return decode_batch(model, [prompt_ids], cfg, vocab,
                        seeds=[cfg.seed if seed is None else seed])[0]


def decode_batch(model: MaskPredictor, prompts, cfg: DecodeConfig, vocab: Vocab,
                 seeds=None) -> list[Trajectory]:
    """Decode a batch of prompts under one shared config.

    Prompts must share length. Each row runs on its own RNG stream, so a
    row's outcome depends only on (params, prompt, config, row seed).
    """
    n = len(prompts)
    if n == 0:
        return []
    prompts = [tuple(p) for p in prompts]
    P = len(prompts[0])
    if any(len(p) != P for p in prompts):
        raise ConfigError("batched prompts must share length")
    if seeds is None:
        seeds = [cfg.seed] * n
    L = cfg.response_len
    plan = _block_plan(cfg)
    total_steps = sum(b for _, _, b in plan)
    strategy = cfg.normalized_strategy()

    ids = np.empty((n, P + L), dtype=np.int64)
    for r, p in enumerate(prompts):
        ids[r, :P] = p
    ids[:, P:] = vocab.mask_id

    states = [
        ScoreState(strategy=strategy, L=L, rng=substream(int(seeds[r]), "decode"))
        for r in range(n)
    ]
    committed = np.full((n, L), vocab.mask_id, dtype=np.int64)  # x_t record, response region
    records: list[list[TrajectoryStep]] = [[] for _ in range(n)]

    t_global = total_steps
    for lo, hi, budget in plan:
        sched = Schedule(cfg.schedule, budget, hi - lo)
        for tb in range(budget, 0, -1):
            with torch.no_grad():
                logits = model(torch.from_numpy(ids))
                probs = predictive_probs(
                    F.softmax(logits, dim=-1).double().numpy(), vocab.mask_id)
            n_next = sched.masked_count(tb - 1)
            for r in range(n):
                resp = ids[r, P:]
                block = np.zeros(L, dtype=bool)
                block[lo:hi] = True
                predicted = (resp == vocab.mask_id) & block
                pos = np.flatnonzero(predicted)
                conf_full = np.zeros(L)
                if pos.size:
                    tokens, conf = sample_tokens(
                        probs[r, P + pos], cfg.temperature, states[r].rng)
                    conf_full[pos] = conf
                    committed[r, pos] = tokens
                states[r].observe(predicted, conf_full)
                # x_{t-1}: committed blocks + current block prediction, masks elsewhere
                x_pred = committed[r].copy()
                scores = masking_scores(states[r], predicted)
                scores[~block] = NEG_INF
                new_resp = remask(x_pred, scores, n_next, vocab.mask_id)
                remasked = new_resp == vocab.mask_id
                # positions outside processed area stay mask in both views
                states[r].commit(predicted, remasked & block)
                records[r].append(TrajectoryStep(
                    t=t_global,
                    masked_ids=prompts[r] + tuple(int(i) for i in resp),
                    predicted_ids=prompts[r] + tuple(int(i) for i in x_pred),
                    confidence=tuple(float(c) for c in states[r].conf),
                    running_confidence=tuple(float(c) for c in states[r].running),
                ))
                ids[r, P:] = new_resp
            t_global -= 1
        for r in range(n):
            fin = np.zeros(L, dtype=bool)
            fin[lo:hi] = True
            states[r].finalize(fin)

    return [
        Trajectory(steps=tuple(records[r]), config=cfg, seed=int(seeds[r]), prompt_len=P)
        for r in range(n)
    ]
