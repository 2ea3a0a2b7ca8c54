"""Forward masking process and the masked-diffusion SFT objective."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import TokenSeq, Vocab
from .model import Adam, MaskPredictor, ModelConfig, save_checkpoint
from .util import substream, write_jsonl


class InvalidTau(ValueError):
    pass


class NoMaskedPositions(ValueError):
    pass


def forward_mask(x0: TokenSeq, tau: float, vocab: Vocab, rng: np.random.Generator) -> TokenSeq:
    """Independently replace each response token by the mask symbol with
    probability tau; the prompt is never corrupted."""
    if not (0.0 < tau <= 1.0):
        raise InvalidTau(f"tau must lie in (0, 1], got {tau}")
    resp = np.array(x0.response_ids, dtype=np.int64)
    hit = rng.random(resp.shape[0]) < tau
    resp[hit] = vocab.mask_id
    return x0.with_response(int(i) for i in resp)


@dataclass
class MaskedBatch:
    """Stacked (x_0, x̄_tau, tau) triples sharing prompt/response lengths."""

    x0: np.ndarray  # [N, S] int64
    masked: np.ndarray  # [N, S] bool, true where x̄ carries the mask symbol
    tau: np.ndarray  # [N]
    prompt_len: int

    def inputs(self, mask_id: int) -> np.ndarray:
        out = self.x0.copy()
        out[self.masked] = mask_id
        return out


def make_masked_batch(seqs: list[TokenSeq], vocab: Vocab, rng: np.random.Generator,
                      max_resample: int = 1000) -> MaskedBatch:
    """Sample tau ~ U(0,1) per item; items whose draw masks zero positions
    are resampled (the importance weight is undefined there)."""
    if not seqs:
        raise NoMaskedPositions("empty batch")
    P = seqs[0].prompt_len
    S = len(seqs[0].ids)
    x0 = np.stack([np.array(s.ids, dtype=np.int64) for s in seqs])
    masked = np.zeros((len(seqs), S), dtype=bool)
    taus = np.zeros(len(seqs))
    for k in range(len(seqs)):
        for _ in range(max_resample):
            tau = float(rng.uniform(0.0, 1.0))
            if tau == 0.0:
                continue
            hit = rng.random(S - P) < tau
            if hit.any():
                masked[k, P:] = hit
                taus[k] = tau
                break
        else:
            raise NoMaskedPositions("could not draw a nonempty mask")
    return MaskedBatch(x0=x0, masked=masked, tau=taus, prompt_len=P)


def sft_loss(model, batch: MaskedBatch, vocab: Vocab) -> torch.Tensor:
    """Monte-Carlo masked cross-entropy with the 1/tau importance weight,
    normalized by response length so batches are comparable."""
    if batch.x0.shape[0] == 0:
        raise NoMaskedPositions("empty batch")
    if not batch.masked[:, batch.prompt_len:].any(axis=1).all():
        raise NoMaskedPositions("every item needs at least one masked position")
    ids_in = torch.from_numpy(batch.inputs(vocab.mask_id))
    logits = model(ids_in)
    logp = F.log_softmax(logits, dim=-1)
    targets = torch.from_numpy(batch.x0)
    tok_logp = logp.gather(2, targets.unsqueeze(-1)).squeeze(-1)
    mask = torch.from_numpy(batch.masked)
    L = batch.x0.shape[1] - batch.prompt_len
    tau = torch.from_numpy(batch.tau).to(tok_logp.dtype)
    per_item = -(tok_logp * mask).sum(dim=1) / tau / L
    return per_item.mean()


@dataclass
class SftConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    response_len: int = 16
    log_path: str | None = None
    ckpt_path: str | None = None
    ckpt_interval: int = 0  # 0 = final only
    log_every: int = 50


def encode_example(item: dict, vocab: Vocab, response_len: int) -> TokenSeq:
    """prompt + response, response padded with the pad symbol to L."""
    prompt = vocab.encode(item["prompt"])
    resp = vocab.encode(item["response"])
    if len(resp.ids) > response_len:
        raise ValueError(f"response longer than L={response_len}: {item['response']!r}")
    ids = prompt.ids + resp.ids + (vocab.pad_id,) * (response_len - len(resp.ids))
    return TokenSeq(ids=ids, prompt_len=len(prompt.ids))


def train_sft(dataset: list[dict], cfg: SftConfig, vocab: Vocab,
              model: MaskPredictor | None = None) -> MaskPredictor:
    """Adam training loop over the Eq-style masked objective.

    Deterministic given (dataset, cfg); emits a JSON-lines loss log and
    checkpoints when paths are configured.
    """
    seqs = [encode_example(item, vocab, cfg.response_len) for item in dataset]
    P = seqs[0].prompt_len
    if any(s.prompt_len != P for s in seqs):
        raise ValueError("dataset prompts must share tokenized length")
    if model is None:
        mc = ModelConfig(
            vocab_size=vocab.size,
            max_len=P + cfg.response_len,
            d_model=cfg.d_model,
            n_layers=cfg.n_layers,
            n_heads=cfg.n_heads,
        )
        model = MaskPredictor(mc, seed=cfg.seed)
    opt = Adam(model, lr=cfg.lr)
    data_rng = substream(cfg.seed, "sft-data")
    mask_rng = substream(cfg.seed, "sft-mask")
    log = []
    t0 = time.time()
    for step in range(cfg.steps):
        idx = data_rng.integers(0, len(seqs), size=cfg.batch_size)
        batch = make_masked_batch([seqs[i] for i in idx], vocab, mask_rng)
        loss = sft_loss(model, batch, vocab)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.append({"step": step, "loss": float(loss.item()), "lr": cfg.lr,
                        "seed": cfg.seed, "elapsed": round(time.time() - t0, 2)})
        if cfg.ckpt_path and cfg.ckpt_interval and (step + 1) % cfg.ckpt_interval == 0:
            save_checkpoint(model, f"{cfg.ckpt_path}.step{step + 1}", seed=cfg.seed)
    if cfg.ckpt_path:
        save_checkpoint(model, cfg.ckpt_path, seed=cfg.seed)
    if cfg.log_path:
        write_jsonl(cfg.log_path, log)
    return model
