"""Trajectory-level policy optimization with grouped rollouts.

Rollouts come from a frozen old-policy snapshot; every intermediate
prediction is verified (optionally strided), step scores turn the reward
sequence into per-step credit, and advantages normalize scores across the
G rollouts of each prompt. The update maximizes the clipped importance-
weighted advantage minus an exact categorical KL to a frozen reference.

Boundary conventions (the published recursion leaves both undefined): the
fully masked start carries reward 0, and the step score at t = 0 drops
the empty future-mean term.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import DecodeConfig, Trajectory, Vocab
from .decoding import ConfigError, _block_plan, decode_batch
from .evaluation import evaluate
from .model import Adam, MaskPredictor, NonFinite, save_checkpoint
from .rewards import verify_completion
from .util import substream, write_jsonl

EPS_STD = 1e-8


@dataclass
class MdpoConfig:
    group_size: int = 8
    rollout_steps: int = 32
    eps_clip: float = 0.2
    beta: float = 0.01
    inner_epochs: int = 2
    mode_mix: float = 0.5  # probability a rollout runs semi-AR
    block_size: int = 8  # semi-AR block size for rollouts
    reward_stride: int = 1
    updates: int = 100
    batch_prompts: int = 8
    lr: float = 1e-4
    temperature: float = 1.0
    strategy: str = "lcr"
    schedule: str = "linear"
    response_len: int = 16
    seed: int = 0
    train_on_backslide_only: bool = True
    chunk_rows: int = 512
    log_path: str | None = None
    ckpt_path: str | None = None


@dataclass
class RolloutGroup:
    item: dict
    trajectories: list[Trajectory]
    rewards: np.ndarray  # [G, T+1], index t = 0..T (rewards[:, T] == 0)
    modes: list[str]
    n_verifications: int


def _mode_config(cfg: MdpoConfig, mode: str) -> DecodeConfig:
    block = cfg.response_len if mode == "pure-diff" else cfg.block_size
    return DecodeConfig(
        strategy=cfg.strategy,
        schedule=cfg.schedule,
        block_size=block,
        steps=cfg.rollout_steps,
        response_len=cfg.response_len,
        temperature=cfg.temperature,
        seed=cfg.seed,
    )


def _check_step_alignment(cfg: MdpoConfig) -> None:
    if not (0.0 < cfg.mode_mix < 1.0):
        return
    plan = _block_plan(_mode_config(cfg, "semi-ar"))
    total = sum(b for _, _, b in plan)
    if total != cfg.rollout_steps:
        raise ConfigError(
            f"mixed-mode rollouts need equal step counts; semi-AR yields "
            f"{total} steps vs {cfg.rollout_steps} (pick T, L, B with B | L and L | T*B)")


def draw_modes(n: int, mode_mix: float, rng: np.random.Generator) -> list[str]:
    """Independent per-trajectory mode draws; mode_mix is the semi-AR share."""
    return ["semi-ar" if rng.random() < mode_mix else "pure-diff" for _ in range(n)]


def rollout_rewards(traj: Trajectory, item: dict, vocab: Vocab, stride: int):
    """Reward vector r[t] for t = 0..T with r[T] = 0 (fully masked start).

    Steps off the verification stride inherit the nearest verified value
    at a higher t. Returns (rewards, number of verification events).
    """
    T = traj.total_steps
    r = np.zeros(T + 1)
    cache: dict[str, int] = {}
    n_verified = 0
    last = 0.0
    for t in range(T - 1, -1, -1):
        if t == 0 or t % stride == 0:
            text = vocab.decode_ids(traj.prediction_at(t)[traj.prompt_len:])
            if text not in cache:
                cache[text] = verify_completion(text, item).reward
            last = float(cache[text])
            n_verified += 1
        r[t] = last
    return r, n_verified


def collect_rollouts(model_old: MaskPredictor, items: list[dict], group_size: int,
                     cfg: MdpoConfig, vocab: Vocab, round_seed: int) -> list[RolloutGroup]:
    """G trajectories per prompt from the old-policy snapshot, modes drawn
    independently per trajectory, every strided step verified."""
    if group_size < 2:
        raise ConfigError("group size must be >= 2")
    _check_step_alignment(cfg)
    mode_rng = substream(round_seed, "mode")
    plans = []  # (item_idx, k, mode, seed)
    for i in range(len(items)):
        modes = draw_modes(group_size, cfg.mode_mix, mode_rng)
        for k in range(group_size):
            plans.append((i, k, modes[k],
                          int(substream(round_seed, "traj", i, k).integers(0, 2**31))))

    trajs: dict[tuple[int, int], tuple[Trajectory, str]] = {}
    for mode in ("pure-diff", "semi-ar"):
        rows = [p for p in plans if p[2] == mode]
        if not rows:
            continue
        prompts = [vocab.encode(items[i]["prompt"]).ids for i, _, _, _ in rows]
        out = decode_batch(model_old, prompts, _mode_config(cfg, mode), vocab,
                           seeds=[s for _, _, _, s in rows])
        for (i, k, _, _), traj in zip(rows, out):
            trajs[(i, k)] = (traj, mode)

    groups = []
    for i, item in enumerate(items):
        members, modes, rewards, n_ver = [], [], [], 0
        for k in range(group_size):
            traj, mode = trajs[(i, k)]
            r, nv = rollout_rewards(traj, item, vocab, cfg.reward_stride)
            members.append(traj)
            modes.append(mode)
            rewards.append(r)
            n_ver += nv
        groups.append(RolloutGroup(
            item=item, trajectories=members, rewards=np.stack(rewards),
            modes=modes, n_verifications=n_ver))
    return groups


# ---------------------------------------------------------------------------
# Step scores and group-relative advantages

def step_scores(rewards: np.ndarray) -> np.ndarray:
    """Per-step score s[t] for one trajectory's reward vector r[0..T].

    s[t] = r[t] - r[t+1] + mean(r[0..t-1]); the future-mean term is empty
    at t = 0 and r[T+1] is taken as 0.
    """
    rewards = np.asarray(rewards, dtype=float)
    T = len(rewards) - 1
    s = np.zeros(T + 1)
    for t in range(T + 1):
        nxt = rewards[t + 1] if t < T else 0.0
        fut = rewards[:t].mean() if t >= 1 else 0.0
        s[t] = rewards[t] - nxt + fut
    return s


def group_advantages(scores: np.ndarray) -> np.ndarray:
    """Normalize scores across the group per step (population std with an
    additive guard; all-equal rows get zero advantage)."""
    scores = np.asarray(scores, dtype=float)
    if scores.shape[0] < 2:
        raise ConfigError("group advantages need G >= 2")
    mean = scores.mean(axis=0, keepdims=True)
    std = scores.std(axis=0, keepdims=True)
    adv = np.where(std < EPS_STD, 0.0, (scores - mean) / (std + EPS_STD))
    return adv


def group_step_advantages(group: RolloutGroup) -> np.ndarray:
    return group_advantages(np.stack([step_scores(r) for r in group.rewards]))


# ---------------------------------------------------------------------------
# Surrogate objective

@dataclass
class TrainingRows:
    """Flattened (trajectory, step) records ready for batched forwards."""

    inputs: np.ndarray  # [M, S] masked model inputs x̄_t
    targets: np.ndarray  # [M, S] sampled predictions x_{t-1}
    action_mask: np.ndarray  # [M, S] positions sampled this step
    old_prob: np.ndarray  # [M, S] old-policy prob of the sampled token (1 elsewhere)
    advantage: np.ndarray  # [M]

    @property
    def n_rows(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_actions(self) -> int:
        return int(self.action_mask.sum())

    def slice(self, lo: int, hi: int) -> "TrainingRows":
        return TrainingRows(self.inputs[lo:hi], self.targets[lo:hi],
                            self.action_mask[lo:hi], self.old_prob[lo:hi],
                            self.advantage[lo:hi])


def build_training_rows(groups: list[RolloutGroup], mask_id: int) -> TrainingRows:
    inputs, targets, masks, oldp, adv = [], [], [], [], []
    for group in groups:
        A = group_step_advantages(group)
        for k, traj in enumerate(group.trajectories):
            P = traj.prompt_len
            for step in traj.steps:
                x_in = np.array(step.masked_ids, dtype=np.int64)
                x_out = np.array(step.predicted_ids, dtype=np.int64)
                act = (x_in == mask_id) & (x_out != mask_id)
                if not act.any():
                    continue
                prob = np.ones(len(x_in))
                conf = np.array(step.confidence)
                resp_act = act[P:]
                prob[P:][resp_act] = conf[resp_act]
                inputs.append(x_in)
                targets.append(x_out)
                masks.append(act)
                oldp.append(prob)
                adv.append(A[k, step.t - 1])
    return TrainingRows(
        inputs=np.stack(inputs),
        targets=np.stack(targets),
        action_mask=np.stack(masks),
        old_prob=np.stack(oldp),
        advantage=np.array(adv),
    )


NEG_LARGE = -1e9  # excludes the mask column from softmax without inf/nan


def surrogate_terms(model, ref_model, rows: TrainingRows, eps_clip: float,
                    beta: float, mask_id: int):
    """Sum of per-token objective terms over one chunk of rows.

    The policy distribution excludes the mask symbol, matching the
    predictive distribution the rollouts sampled from. Returns
    (objective_sum tensor, stats dict); the caller divides by the global
    action count and negates.
    """
    ids = torch.from_numpy(rows.inputs)
    logits = model(ids)
    dtype = logits.dtype
    logits = logits.clone()
    logits[..., mask_id] = NEG_LARGE
    logp = F.log_softmax(logits, dim=-1)
    tok_logp = logp.gather(2, torch.from_numpy(rows.targets).unsqueeze(-1)).squeeze(-1)
    mask = torch.from_numpy(rows.action_mask)
    old_logp = torch.log(torch.from_numpy(rows.old_prob)).to(dtype)
    ratio = torch.exp(tok_logp - old_logp)
    adv = torch.from_numpy(rows.advantage).to(dtype).unsqueeze(-1)
    clipped = torch.clamp(ratio, 1.0 - eps_clip, 1.0 + eps_clip)
    surr = torch.minimum(ratio * adv, clipped * adv)

    if beta != 0.0:
        with torch.no_grad():
            ref_logits = ref_model(ids)
            ref_logits[..., mask_id] = NEG_LARGE
            ref_logp = F.log_softmax(ref_logits, dim=-1).to(dtype)
        p = torch.exp(logp)
        kl = (p * (logp - ref_logp)).sum(dim=-1)
    else:
        kl = torch.zeros_like(surr)

    terms = (surr - beta * kl) * mask
    if not torch.isfinite(terms).all():
        raise NonFinite("non-finite surrogate term")
    with torch.no_grad():
        clip_hits = ((ratio - 1.0).abs() > eps_clip) & mask
        stats = {
            "clip_hits": int(clip_hits.sum().item()),
            "kl_sum": float((kl * mask).sum().item()),
            "n_actions": int(mask.sum().item()),
        }
    return terms.sum(), stats


def surrogate_loss(model, ref_model, groups: list[RolloutGroup], eps_clip: float,
                   beta: float, vocab: Vocab) -> torch.Tensor:
    """Full-batch negative objective (used directly by the grad checks;
    training chunks the same terms for memory)."""
    rows = build_training_rows(groups, vocab.mask_id)
    total, _ = surrogate_terms(model, ref_model, rows, eps_clip, beta, vocab.mask_id)
    return -total / rows.n_actions


# ---------------------------------------------------------------------------
# Training loop and the backslide data filter

def filter_backslide(model: MaskPredictor, items: list[dict], eval_cfg: DecodeConfig,
                     vocab: Vocab, seed: int = 0):
    """Decode each prompt once; keep prompts where some intermediate step
    verifies but the final output does not."""
    result = evaluate(model, items, eval_cfg, vocab, seed=seed)
    kept = [item for item, rep in zip(items, result.reports) if rep.backslide]
    return kept, result.reports


def train_mdpo(items: list[dict], cfg: MdpoConfig, vocab: Vocab,
               init_model: MaskPredictor,
               filter_eval_cfg: DecodeConfig | None = None,
               eval_items: list[dict] | None = None,
               eval_cfgs: dict[str, DecodeConfig] | None = None,
               eval_every: int = 10) -> tuple[MaskPredictor, list[dict]]:
    """Policy optimization from an SFT checkpoint. Returns (model, metric log).

    The reference model is the frozen initial checkpoint; the old policy
    is re-snapshotted before every rollout round. When eval_items is given,
    held-out accuracy lands in the metric log every eval_every updates.
    """
    _check_step_alignment(cfg)
    model = init_model
    ref = model.snapshot("reference")

    train_items = items
    filtered_n = None
    if cfg.train_on_backslide_only:
        fe = filter_eval_cfg or DecodeConfig(
            strategy=cfg.strategy, schedule=cfg.schedule, block_size=cfg.block_size,
            steps=cfg.rollout_steps, response_len=cfg.response_len,
            temperature=0.0, seed=cfg.seed)
        kept, _ = filter_backslide(model, items, fe, vocab, seed=cfg.seed)
        filtered_n = len(kept)
        if kept:
            train_items = kept
        # an empty filtered subset falls back to all data rather than stalling

    opt = Adam(model, lr=cfg.lr)
    log: list[dict] = []
    total_verifications = 0
    t0 = time.time()
    for update in range(cfg.updates):
        old = model.snapshot("old")
        pick_rng = substream(cfg.seed, "prompts", update)
        idx = pick_rng.choice(len(train_items), size=cfg.batch_prompts,
                              replace=len(train_items) < cfg.batch_prompts)
        batch_items = [train_items[int(i)] for i in idx]
        round_seed = int(substream(cfg.seed, "rollout", update).integers(0, 2**31))
        groups = collect_rollouts(old, batch_items, cfg.group_size, cfg, vocab, round_seed)
        rows = build_training_rows(groups, vocab.mask_id)
        total_verifications += sum(g.n_verifications for g in groups)

        clip_hits = kl_sum = 0
        for _ in range(cfg.inner_epochs):
            opt.zero_grad()
            clip_hits = kl_sum = 0
            for lo in range(0, rows.n_rows, cfg.chunk_rows):
                chunk = rows.slice(lo, lo + cfg.chunk_rows)
                terms, stats = surrogate_terms(model, ref, chunk, cfg.eps_clip,
                                               cfg.beta, vocab.mask_id)
                (-terms / rows.n_actions).backward()
                clip_hits += stats["clip_hits"]
                kl_sum += stats["kl_sum"]
            opt.step()

        rewards = np.stack([g.rewards for g in groups])  # [P, G, T+1]
        entry = {
            "update": update,
            "mean_final_reward": float(rewards[:, :, 0].mean()),
            "mean_intermediate_reward": float(rewards[:, :, :-1].mean()),
            "kl": kl_sum / max(rows.n_actions, 1),
            "clip_fraction": clip_hits / max(rows.n_actions, 1),
            "backslide_rate": float(np.mean([
                float(bool(g.rewards[k, 1:-1].any()) and not g.rewards[k, 0])
                for g in groups for k in range(cfg.group_size)
            ])),
            "n_verifications": sum(g.n_verifications for g in groups),
            "total_verifications": total_verifications,
            "filtered_dataset_size": filtered_n,
            "elapsed": round(time.time() - t0, 2),
            "seed": cfg.seed,
        }
        if eval_items and eval_cfgs and (
            (update + 1) % eval_every == 0 or update == cfg.updates - 1
        ):
            entry["eval_accuracy"] = {
                name: evaluate(model, eval_items, ecfg, vocab, seed=cfg.seed).accuracy
                for name, ecfg in eval_cfgs.items()
            }
        log.append(entry)
        if cfg.ckpt_path and (update + 1) % max(1, cfg.updates // 4) == 0:
            save_checkpoint(model, f"{cfg.ckpt_path}.update{update + 1}", seed=cfg.seed)

    if cfg.ckpt_path:
        save_checkpoint(model, cfg.ckpt_path, seed=cfg.seed)
    if cfg.log_path:
        write_jsonl(cfg.log_path, log)
    return model, log
