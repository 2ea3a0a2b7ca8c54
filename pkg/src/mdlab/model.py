"""Bidirectional transformer mask predictor, Adam, checkpoints, grad check."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeMismatch(ValueError):
    pass


class NonFinite(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    max_len: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeMismatch("d_model must be divisible by n_heads")


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.attn_out = nn.Linear(d_model, d_model)
        self.fc1 = nn.Linear(d_model, 4 * d_model)
        self.fc2 = nn.Linear(4 * d_model, d_model)

    def forward(self, x):
        n, s, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).split(d, dim=2)
        q = q.view(n, s, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(n, s, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(n, s, self.n_heads, self.head_dim).transpose(1, 2)
        # fully bidirectional: no attention mask
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        att = F.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).contiguous().view(n, s, d)
        x = x + self.attn_out(y)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x


class MaskPredictor(nn.Module):
    """p_theta(token | partially masked sequence), all positions at once."""

    def __init__(self, config: ModelConfig, seed: int = 0, version: str = "current"):
        super().__init__()
        self.config = config
        self.version = version
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Parameter(torch.zeros(config.max_len, config.d_model))
        self.blocks = nn.ModuleList(
            Block(config.d_model, config.n_heads) for _ in range(config.n_layers)
        )
        self.ln_f = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        self._init_weights(seed)

    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(int(seed))
        for name, p in self.named_parameters():
            if p.dim() >= 2 or "emb" in name:
                with torch.no_grad():
                    p.copy_(torch.normal(0.0, 0.02, size=p.shape, generator=gen))
            elif name.endswith(".bias"):
                nn.init.zeros_(p)
        # LayerNorm affine stays at the default (ones, zeros)
        for m in self.modules():
            if isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        n, s = ids.shape
        if s > self.config.max_len:
            raise ShapeMismatch(f"sequence length {s} exceeds capacity {self.config.max_len}")
        x = self.tok_emb(ids) + self.pos_emb[:s]
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def snapshot(self, version: str) -> "MaskPredictor":
        """Deep, frozen-by-convention copy tagged old/reference/etc."""
        clone = copy.deepcopy(self)
        clone.version = version
        for p in clone.parameters():
            p.requires_grad_(False)
        return clone


@torch.no_grad()
def logprobs(model: MaskPredictor, ids: torch.Tensor) -> torch.Tensor:
    return F.log_softmax(model(ids), dim=-1)


# ---------------------------------------------------------------------------
# Adam

def adam_step(params: dict, grads: dict, state: dict | None, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """Pure functional Adam with bias correction.

    params/grads are name->tensor dicts; returns (new_params, new_state).
    """
    b1, b2 = betas
    if state is None:
        state = {
            "t": 0,
            "m": {k: torch.zeros_like(v) for k, v in params.items()},
            "v": {k: torch.zeros_like(v) for k, v in params.items()},
        }
    t = state["t"] + 1
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if not torch.isfinite(g).all():
            raise NonFinite(f"non-finite gradient for {k}")
        m = b1 * state["m"][k] + (1 - b1) * g
        v = b2 * state["v"][k] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[k] = p - lr * m_hat / (torch.sqrt(v_hat) + eps)
        new_m[k] = m
        new_v[k] = v
    return new_params, {"t": t, "m": new_m, "v": new_v}


class Adam:
    """In-place optimizer over a module, backed by adam_step."""

    def __init__(self, model: nn.Module, lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.model = model
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = None

    def step(self):
        params = {k: p.detach() for k, p in self.model.named_parameters()}
        grads = {
            k: (p.grad if p.grad is not None else torch.zeros_like(p))
            for k, p in self.model.named_parameters()
        }
        new_params, self.state = adam_step(params, grads, self.state, self.lr, self.betas, self.eps)
        with torch.no_grad():
            for k, p in self.model.named_parameters():
                p.copy_(new_params[k])

    def zero_grad(self):
        for p in self.model.parameters():
            p.grad = None


# ---------------------------------------------------------------------------
# Gradient checking

def grad_check(loss_fn, model: MaskPredictor, eps: float = 1e-4,
               coords_per_tensor: int = 3, seed: int = 0,
               floor: float = 1e-6) -> float:
    """Max relative error between autograd and central finite differences.

    loss_fn(model) must be a deterministic scalar. Evaluation happens on a
    float64 copy of the model; the original is untouched. The denominator
    is floored: along exactly-null directions (e.g. an attention key bias,
    which shifts every softmax logit equally) both sides are pure roundoff
    and their ratio would be noise.
    """
    m64 = copy.deepcopy(model).double()
    for p in m64.parameters():
        p.requires_grad_(True)

    loss = loss_fn(m64)
    if not torch.isfinite(loss):
        raise NonFinite("loss is non-finite")
    m64.zero_grad()
    loss.backward()

    rng = np.random.default_rng(seed)
    max_err = 0.0
    for _, p in m64.named_parameters():
        flat = p.detach().view(-1)
        gflat = (p.grad if p.grad is not None else torch.zeros_like(p)).view(-1)
        n = flat.numel()
        idx = rng.choice(n, size=min(coords_per_tensor, n), replace=False)
        for i in idx:
            i = int(i)
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
            lp = loss_fn(m64).item()
            with torch.no_grad():
                flat[i] = orig - eps
            lm = loss_fn(m64).item()
            with torch.no_grad():
                flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NonFinite("non-finite loss during finite differencing")
            numeric = (lp - lm) / (2 * eps)
            analytic = gflat[i].item()
            err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)
            max_err = max(max_err, err)
    return max_err


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + little-endian float32 blob

def _ckpt_paths(path):
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    return path.with_suffix(".json"), path.with_suffix(".bin")


def save_checkpoint(model: MaskPredictor, path, seed: int = 0) -> None:
    manifest_path, blob_path = _ckpt_paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    chunks = []
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "hyper": asdict(model.config),
        "version": model.version,
        "seed": seed,
        "tensors": tensors,
    }
    manifest_path.write_text(json.dumps(manifest, indent=1))
    blob_path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[MaskPredictor, dict]:
    manifest_path, blob_path = _ckpt_paths(path)
    manifest = json.loads(manifest_path.read_text())
    blob = blob_path.read_bytes()
    config = ModelConfig(**manifest["hyper"])
    model = MaskPredictor(config, seed=0, version=manifest.get("version", "current"))
    named = dict(model.named_parameters())
    with torch.no_grad():
        for spec in manifest["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=spec["offset"])
            named[spec["name"]].copy_(torch.from_numpy(arr.reshape(shape).copy()))
    return model, manifest
