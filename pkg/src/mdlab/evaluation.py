"""Checkpoint evaluation: decode, verify every step, aggregate metrics."""

from __future__ import annotations

from dataclasses import dataclass

from .analysis import TrajectoryReport, backslide_rate, report_for
from .core import DecodeConfig, Trajectory, Vocab
from .decoding import decode_batch
from .model import MaskPredictor
from .rewards import verify_completion
from .util import substream


def step_reward_sequence(traj: Trajectory, item: dict, vocab: Vocab) -> list[int]:
    """Chronological rewards r(x_{T-1})..r(x_0) for one trajectory."""
    cache: dict[str, int] = {}
    rewards = []
    for step in traj.steps:
        text = vocab.decode_ids(step.predicted_ids[traj.prompt_len:])
        if text not in cache:
            cache[text] = verify_completion(text, item).reward
        rewards.append(cache[text])
    return rewards


@dataclass
class EvalResult:
    accuracy: float
    acc_with_intermediate: float
    backslide_rate: float
    n: int
    reports: list[TrajectoryReport]

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "acc_with_intermediate": self.acc_with_intermediate,
            "backslide_rate": self.backslide_rate,
            "n": self.n,
        }


def evaluate(model: MaskPredictor, items: list[dict], cfg: DecodeConfig,
             vocab: Vocab, seed: int = 0, batch_size: int = 64) -> EvalResult:
    """Accuracy of final outputs plus the intermediate-step bookkeeping.

    acc_with_intermediate counts runs whose final output OR any
    intermediate prediction verifies, so by construction
    acc_with_intermediate == accuracy + backslide_rate.
    """
    if not items:
        raise ValueError("empty evaluation dataset")
    reports: list[TrajectoryReport] = []
    n_correct = 0
    n_any = 0
    mode = "pure-diff" if cfg.effective_block() == cfg.response_len else "semi-ar"
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        prompts = [vocab.encode(it["prompt"]).ids for it in chunk]
        seeds = [int(substream(seed, "eval", start + j).integers(0, 2**31)) for j in range(len(chunk))]
        trajs = decode_batch(model, prompts, cfg, vocab, seeds=seeds)
        for j, (traj, item) in enumerate(zip(trajs, chunk)):
            rewards = step_reward_sequence(traj, item, vocab)
            rep = report_for(f"item{start + j}", mode, rewards)
            reports.append(rep)
            n_correct += int(rep.final_correct)
            n_any += int(rep.final_correct or rep.backslide)
    n = len(items)
    return EvalResult(
        accuracy=n_correct / n,
        acc_with_intermediate=n_any / n,
        backslide_rate=backslide_rate(reports),
        n=n,
        reports=reports,
    )
