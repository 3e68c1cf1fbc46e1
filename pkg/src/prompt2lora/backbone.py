"""Tiny character-level decoder-only transformer that serves as the frozen base model.

Sequences are ``prompt <sep> answer <eos>``; the loss only covers the
answer and the end marker.  Query and value projections accept an optional
low-rank delta ``(A, B)`` that is added as a separate path, which is what
the adapter training differentiates through.
"""

from __future__ import annotations

import hashlib
import string
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DomainError, StructuralError
from .fileio import read_tensor_file, write_tensor_file

PAD, SEP, EOS = 0, 1, 2
DEFAULT_VOCAB = string.ascii_lowercase + string.ascii_uppercase + string.digits + " :+="
BACKBONE_MAGIC = b"P2LBKBN\x00"


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 2
    d: int = 64
    n_heads: int = 4
    vocab: str = DEFAULT_VOCAB
    context_len: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ConfigurationError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if len(set(self.vocab)) != len(self.vocab):
            raise ConfigurationError("vocab has duplicate characters")

    @property
    def vocab_size(self):
        return len(self.vocab) + 3

    def adapted_layers(self):
        """Canonical enumeration of LoRA-adapted projections: (name, d_out, k_in)."""
        return [(f"blocks.{i}.attn.{p}", self.d, self.d) for i in range(self.n_layers) for p in ("q", "v")]

    def to_dict(self):
        return asdict(self)


class CharTokenizer:
    def __init__(self, vocab):
        self.vocab = vocab
        self.stoi = {c: i + 3 for i, c in enumerate(vocab)}
        self.itos = {i: c for c, i in self.stoi.items()}

    def encode(self, text):
        try:
            return [self.stoi[c] for c in text]
        except KeyError as e:
            raise DomainError(f"character {e.args[0]!r} is not in the backbone vocabulary") from None

    def decode(self, ids):
        out = []
        for i in ids:
            if i == EOS:
                break
            out.append(self.itos.get(int(i), ""))
        return "".join(out)

    def sequence(self, prompt, answer):
        return self.encode(prompt) + [SEP] + self.encode(answer) + [EOS]


class Attention(nn.Module):
    def __init__(self, d, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d)

    def forward(self, x, delta_q=None, delta_v=None):
        b, t, d = x.shape
        q, k, v = self.q(x), self.k(x), self.v(x)
        if delta_q is not None:
            A, B = delta_q
            q = q + (x @ A.T) @ B.T
        if delta_v is not None:
            A, B = delta_v
            v = v + (x @ A.T) @ B.T
        h = self.n_heads
        q, k, v = (z.view(b, t, h, d // h).transpose(1, 2) for z in (q, k, v))
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return self.o(y.transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    def __init__(self, d, n_heads):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = Attention(d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, x, delta_q=None, delta_v=None):
        x = x + self.attn(self.ln1(x), delta_q, delta_v)
        return x + self.mlp(self.ln2(x))


class TinyTransformer(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.tok = nn.Embedding(config.vocab_size, config.d)
            self.pos = nn.Embedding(config.context_len, config.d)
            self.blocks = nn.ModuleList(Block(config.d, config.n_heads) for _ in range(config.n_layers))
            self.ln_f = nn.LayerNorm(config.d)
            self.head = nn.Linear(config.d, config.vocab_size)

    def forward(self, idx, lora=None):
        """Logits for ``idx``; ``lora`` maps adapted layer names to ``(A, B)`` tensors."""
        t = idx.shape[1]
        if t > self.config.context_len:
            raise DomainError(f"sequence length {t} exceeds context_len {self.config.context_len}")
        x = self.tok(idx) + self.pos(torch.arange(t, device=idx.device))
        lora = lora or {}
        for i, blk in enumerate(self.blocks):
            x = blk(x, lora.get(f"blocks.{i}.attn.q"), lora.get(f"blocks.{i}.attn.v"))
        return self.head(self.ln_f(x))


class Backbone:
    """Frozen base model plus its tokenizer."""

    def __init__(self, config: BackboneConfig, model: TinyTransformer | None = None):
        self.config = config
        self.model = model if model is not None else TinyTransformer(config)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = CharTokenizer(config.vocab)

    def weights(self):
        return {k: v.detach().clone() for k, v in self.model.state_dict().items()}

    def weight_hash(self):
        h = hashlib.sha256()
        for k, v in sorted(self.model.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def save(self, path):
        tensors = {k: v.numpy() for k, v in self.model.state_dict().items()}
        return write_tensor_file(path, BACKBONE_MAGIC, {"config": self.config.to_dict()}, tensors)

    @classmethod
    def load(cls, path):
        meta, tensors = read_tensor_file(path, BACKBONE_MAGIC)
        bb = cls(BackboneConfig(**meta["config"]))
        bb.model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        return bb


def merge(weights, checkpoint):
    """Effective weights ``W_0 + B A`` for every adapted layer; others are copied as-is.

    ``weights`` is a state dict; ``checkpoint`` anything exposing ``layers``
    as ``(name, A, B)`` triples.
    """
    out = dict(weights)
    for name, A, B in checkpoint.layers:
        key = f"{name}.weight"
        if key not in weights:
            raise StructuralError(f"adapter layer {name!r} does not exist in the backbone")
        W0 = weights[key]
        A = torch.as_tensor(np.asarray(A), dtype=W0.dtype)
        B = torch.as_tensor(np.asarray(B), dtype=W0.dtype)
        if B.shape[0] != W0.shape[0] or A.shape[1] != W0.shape[1] or A.shape[0] != B.shape[1]:
            raise StructuralError(
                f"{name}: A{tuple(A.shape)} and B{tuple(B.shape)} do not fit W0{tuple(W0.shape)}"
            )
        out[key] = W0 + B @ A
    return out


def encode_samples(tokenizer, prompts, answers, context_len):
    """Padded (inputs, targets) for teacher forcing; non-answer targets are -100."""
    seqs, starts = [], []
    for p, a in zip(prompts, answers):
        s = tokenizer.sequence(p, a)
        if len(s) - 1 > context_len:
            raise DomainError(f"sample {p!r} -> {a!r} does not fit context_len {context_len}")
        seqs.append(s)
        starts.append(len(p) + 1)
    T = max(len(s) for s in seqs) - 1
    x = torch.full((len(seqs), T), PAD, dtype=torch.long)
    y = torch.full((len(seqs), T), -100, dtype=torch.long)
    for i, (s, st) in enumerate(zip(seqs, starts)):
        x[i, : len(s) - 1] = torch.tensor(s[:-1])
        tgt = torch.tensor(s[1:])
        y[i, st - 1 : len(s) - 1] = tgt[st - 1 :]
    return x, y


def sequence_loss(model, x, y, lora=None):
    logits = model(x, lora)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), y.reshape(-1), ignore_index=-100)


@torch.no_grad()
def greedy_decode(model, tokenizer, prompts, max_new=8, state=None):
    """Greedy answers for ``prompts``; ``state`` optionally overrides model weights."""
    from torch.func import functional_call

    def run(idx):
        if state is None:
            return model(idx)
        return functional_call(model, state, (idx,))

    answers = [None] * len(prompts)
    groups = {}
    for i, p in enumerate(prompts):
        groups.setdefault(len(p), []).append(i)
    for _, ids in sorted(groups.items()):
        idx = torch.tensor([tokenizer.encode(prompts[i]) + [SEP] for i in ids])
        done = torch.zeros(len(ids), dtype=torch.bool)
        out = []
        for _ in range(max_new):
            if idx.shape[1] >= model.config.context_len:
                break
            nxt = run(idx)[:, -1].argmax(-1)
            nxt = torch.where(done, torch.full_like(nxt, EOS), nxt)
            out.append(nxt)
            done |= nxt == EOS
            idx = torch.cat([idx, nxt[:, None]], dim=1)
            if bool(done.all()):
                break
        gen = torch.stack(out, 1) if out else torch.zeros((len(ids), 0), dtype=torch.long)
        for row, i in enumerate(ids):
            answers[i] = tokenizer.decode(gen[row].tolist())
    return answers


def train_backbone(config, tasks, steps=3000, lr=3e-3, batch_size=64, seed=0, log_every=0):
    """Fit all base weights on a mixture of task train splits; returns a frozen Backbone."""
    torch.manual_seed(seed)
    model = TinyTransformer(config)
    tok = CharTokenizer(config.vocab)
    prompts = [p for t in tasks for p in t.train.prompts]
    answers = [a for t in tasks for a in t.train.answers]
    x_all, y_all = encode_samples(tok, prompts, answers, config.context_len)
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.01)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.1)
    model.train()
    for step in range(steps):
        idx = torch.randint(len(prompts), (batch_size,), generator=g)
        loss = sequence_loss(model, x_all[idx], y_all[idx])
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        if log_every and step % log_every == 0:
            print(f"backbone step {step} loss {loss.item():.4f}")
    return Backbone(config, model)
