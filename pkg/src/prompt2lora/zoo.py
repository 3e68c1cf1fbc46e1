"""Per-task LoRA fine-tuning and two-phase checkpoint collection.

Only the low-rank factors are optimised; the backbone is frozen and is
never written to.  Collection runs a warm-up phase without saving, then a
second phase at its own learning rate that saves one checkpoint per step.
"""

from __future__ import annotations

import json
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig, encode_samples, greedy_decode, merge, sequence_loss
from .errors import DomainError, StructuralError, TrainingError
from .fileio import read_tensor_file, write_tensor_file

CKPT_MAGIC = b"P2LLORA\x00"


@dataclass
class LoRACheckpoint:
    task_id: str
    step_id: int
    layers: list  # [(name, A [r, k], B [d, r])] in canonical order
    rank: int

    def __post_init__(self):
        for name, A, B in self.layers:
            if A.shape[0] != self.rank or B.shape[1] != self.rank:
                raise StructuralError(f"{name}: factors do not have rank {self.rank}")
            d, k = B.shape[0], A.shape[1]
            if self.rank > min(d, k) / 4:
                raise StructuralError(f"{name}: rank {self.rank} is not << min({d}, {k})")
            if not (np.isfinite(A).all() and np.isfinite(B).all()):
                raise StructuralError(f"{name}: non-finite adapter entries")

    def schema(self):
        """[(name, A shape, B shape)] - what the weight codec needs to lay out a grid."""
        return [(name, tuple(A.shape), tuple(B.shape)) for name, A, B in self.layers]

    def flat(self):
        return np.concatenate([np.concatenate([A.ravel(), B.ravel()]) for _, A, B in self.layers])

    def deltas(self):
        return {name: B @ A for name, A, B in self.layers}

    def as_torch(self):
        return {name: (torch.from_numpy(A), torch.from_numpy(B)) for name, A, B in self.layers}

    def save(self, path):
        meta = {"task_id": self.task_id, "step_id": self.step_id, "rank": self.rank,
                "layers": [n for n, _, _ in self.layers]}
        tensors = {}
        for name, A, B in self.layers:
            tensors[f"{name}.A"] = A
            tensors[f"{name}.B"] = B
        return write_tensor_file(path, CKPT_MAGIC, meta, tensors)

    @classmethod
    def load(cls, path):
        meta, t = read_tensor_file(path, CKPT_MAGIC)
        layers = [(n, t[f"{n}.A"], t[f"{n}.B"]) for n in meta["layers"]]
        return cls(meta["task_id"], meta["step_id"], layers, meta["rank"])


def zero_adapter(config: BackboneConfig, rank=4, task_id="zero"):
    layers = [(n, np.zeros((rank, k), np.float32), np.zeros((d, rank), np.float32))
              for n, d, k in config.adapted_layers()]
    return LoRACheckpoint(task_id, 0, layers, rank)


class LoRATrainer:
    """Stateful adapter optimisation on one dataset.

    ``A`` starts uniform in +-1/sqrt(k) and ``B`` at zero, so the initial
    delta is exactly zero.
    """

    def __init__(self, backbone: Backbone, dataset, rank=4, batch_size=32, seed=0,
                 lr=1e-3, weight_decay=0.0):
        if len(dataset) == 0:
            raise DomainError("cannot train an adapter on an empty dataset")
        self.backbone = backbone
        self.task_id = dataset.task_id
        self.rank = rank
        self.batch_size = min(batch_size, len(dataset))
        cfg = backbone.config
        self.x, self.y = encode_samples(backbone.tokenizer, dataset.prompts, dataset.answers, cfg.context_len)
        self.gen = torch.Generator().manual_seed(seed)
        self.params = {}
        for name, d, k in cfg.adapted_layers():
            bound = 1.0 / math.sqrt(k)
            A = (torch.rand(rank, k, generator=self.gen) * 2 - 1) * bound
            self.params[name] = (A.requires_grad_(), torch.zeros(d, rank, requires_grad=True))
        flat = [p for pair in self.params.values() for p in pair]
        self.opt = torch.optim.AdamW(flat, lr=lr, weight_decay=weight_decay)
        self.steps_done = 0
        self.losses = []

    def set_lr(self, lr):
        for g in self.opt.param_groups:
            g["lr"] = lr

    def step(self):
        idx = torch.randperm(len(self.x), generator=self.gen)[: self.batch_size]
        loss = sequence_loss(self.backbone.model, self.x[idx], self.y[idx], self.params)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"adapter loss became non-finite at step {self.steps_done} on task {self.task_id!r}",
                step=self.steps_done, context={"task_id": self.task_id},
            )
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        self.steps_done += 1
        self.losses.append(loss.item())
        return self.losses[-1]

    def checkpoint(self, step_id=None):
        layers = [(n, A.detach().numpy().copy(), B.detach().numpy().copy()) for n, (A, B) in self.params.items()]
        return LoRACheckpoint(self.task_id, self.steps_done if step_id is None else step_id, layers, self.rank)


def train_lora(backbone, dataset, lr, steps, batch_size=32, seed=0, rank=4, weight_decay=0.0):
    if steps < 1:
        raise DomainError("steps must be >= 1")
    tr = LoRATrainer(backbone, dataset, rank, batch_size, seed, lr, weight_decay)
    for _ in range(steps):
        tr.step()
    return tr.checkpoint()


@dataclass
class PhaseRecipe:
    lr: float
    steps: int


@dataclass
class ZooRecipe:
    """Two-phase collection schedule; defaults here are far shorter than a full-size run."""

    pretrain: PhaseRecipe = field(default_factory=lambda: PhaseRecipe(1e-2, 300))
    finetune: PhaseRecipe = field(default_factory=lambda: PhaseRecipe(1e-3, 20))
    batch_size: int = 32
    rank: int = 4
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(PhaseRecipe(**d.pop("pretrain")), PhaseRecipe(**d.pop("finetune")), **d)

    def to_dict(self):
        return {"pretrain": vars(self.pretrain), "finetune": vars(self.finetune),
                "batch_size": self.batch_size, "rank": self.rank, "seed": self.seed}


def collect_checkpoints(backbone, dataset, pretrain, finetune, batch_size=32, seed=0, rank=4):
    """Warm up for ``pretrain.steps`` without saving, then save one adapter per fine-tune step."""
    if finetune.steps < 1:
        raise DomainError("finetune.steps must be >= 1")
    tr = LoRATrainer(backbone, dataset, rank, batch_size, seed, pretrain.lr)
    for _ in range(pretrain.steps):
        tr.step()
    tr.set_lr(finetune.lr)
    out = []
    for j in range(finetune.steps):
        tr.step()
        out.append(tr.checkpoint(step_id=j))
    return out


def evaluate(backbone, adapter, task, split="test", max_new=8):
    """Exact-match accuracy of greedy decoding with ``adapter`` merged in (None = base model)."""
    ds = task.split(split) if hasattr(task, "split") and callable(task.split) else task
    if len(ds) == 0:
        raise DomainError(f"split {split!r} of {ds.task_id!r} is empty")
    state = None if adapter is None else merge(backbone.weights(), adapter)
    preds = greedy_decode(backbone.model, backbone.tokenizer, ds.prompts, max_new, state)
    return sum(p == a for p, a in zip(preds, ds.answers)) / len(ds)


@dataclass
class ZooManifest:
    backbone: dict
    entries: list
    created_at: float = field(default_factory=time.time)
    backbone_file: str = "backbone.bin"

    def save(self, path):
        Path(path).write_text(json.dumps(
            {"backbone": self.backbone, "backbone_file": self.backbone_file,
             "entries": self.entries, "created_at": self.created_at}, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise DomainError(f"zoo manifest not found: {path}")
        d = json.loads(path.read_text())
        return cls(d["backbone"], d["entries"], d["created_at"], d.get("backbone_file", "backbone.bin"))

    def content_hash(self):
        import hashlib
        body = json.dumps({"backbone": self.backbone, "entries": self.entries}, sort_keys=True)
        return hashlib.sha256(body.encode()).hexdigest()


class Zoo:
    """In-memory checkpoint collection: task_id -> ordered list of checkpoints."""

    def __init__(self, backbone, checkpoints=None):
        self.backbone = backbone
        self.checkpoints = dict(checkpoints or {})

    @property
    def task_ids(self):
        return list(self.checkpoints)

    def subset(self, task_ids):
        missing = [t for t in task_ids if t not in self.checkpoints]
        if missing:
            raise DomainError(f"zoo has no checkpoints for {missing}")
        return Zoo(self.backbone, {t: self.checkpoints[t] for t in task_ids})

    def final(self, task_id):
        return self.checkpoints[task_id][-1]

    def save(self, root, recipe: ZooRecipe):
        root = Path(root)
        (root / "checkpoints").mkdir(parents=True, exist_ok=True)
        self.backbone.save(root / "backbone.bin")
        entries = []
        for tid, cks in self.checkpoints.items():
            for c in cks:
                rel = f"checkpoints/{tid}_{c.step_id:05d}.lora"
                c.save(root / rel)
                entries.append({"task_id": tid, "step_id": c.step_id, "file_path": rel,
                                "pretrain_steps": recipe.pretrain.steps, "finetune_steps": recipe.finetune.steps,
                                "learning_rates": [recipe.pretrain.lr, recipe.finetune.lr]})
        manifest = ZooManifest(self.backbone.config.to_dict(), entries)
        manifest.save(root / "manifest.json")
        return manifest

    @classmethod
    def load(cls, root):
        root = Path(root)
        manifest = ZooManifest.load(root / "manifest.json")
        backbone = Backbone.load(root / manifest.backbone_file)
        cks = {}
        for e in manifest.entries:
            c = LoRACheckpoint.load(root / e["file_path"])
            if (c.task_id, c.step_id) != (e["task_id"], e["step_id"]):
                raise StructuralError(f"{e['file_path']} does not match its manifest entry")
            cks.setdefault(c.task_id, []).append(c)
        for v in cks.values():
            v.sort(key=lambda c: c.step_id)
        return cls(backbone, cks)


def task_seed(seed, task_id):
    return (seed << 32) ^ zlib.crc32(task_id.encode())


def build_zoo(backbone, tasks, recipe: ZooRecipe):
    cks = {}
    for t in tasks:
        cks[t.task_id] = collect_checkpoints(
            backbone, t.train, recipe.pretrain, recipe.finetune,
            batch_size=recipe.batch_size, seed=task_seed(recipe.seed, t.task_id), rank=recipe.rank,
        )
    return Zoo(backbone, cks)
