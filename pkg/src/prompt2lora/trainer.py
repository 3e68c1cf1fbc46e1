"""Prompt-checkpoint pairing and the tokenized-MSE training loop for the generator."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .codec import WeightLayout, WeightTokenGrid, build_layout, decode, encode
from .decoder import DecoderSpec, HyperDecoder, validate_spec
from .encoder import make_encoder
from .errors import ConfigurationError, DomainError, StructuralError, TrainingError
from .fileio import read_tensor_file, write_tensor_file
from .tasks import sample_prompt_batch

log = logging.getLogger(__name__)

GEN_MAGIC = b"P2LHGEN\x00"
STRATEGIES = ("strategy1", "strategy2")


@dataclass
class RunConfig:
    lr: float = 3e-5
    weight_decay: float = 0.1
    max_grad_norm: float = 1.0
    steps: int = 2000
    batch_size: int = 8
    noise_amplitude: float = 1e-4
    strategy: str = "strategy2"
    pool_size: int = 256
    batch_len: int = 16
    condition_source: str = "prompt_only"
    seed: int = 0
    early_stop_windows: int = 0  # 0 disables plateau stopping
    window: int = 100

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown pairing strategy {self.strategy!r}")
        for name in ("steps", "batch_size", "pool_size", "batch_len", "max_grad_norm", "window"):
            if getattr(self, name) < 0 or (name != "steps" and getattr(self, name) == 0):
                raise ConfigurationError(f"{name} must be positive")
        if self.lr < 0 or self.weight_decay < 0 or self.noise_amplitude < 0:
            raise ConfigurationError("lr, weight_decay and noise_amplitude must be >= 0")
        if self.strategy == "strategy2" and self.batch_len > self.pool_size:
            raise ConfigurationError("strategy2 needs batch_len <= pool_size")

    @property
    def prompts_per_pair(self):
        """Number of prompt rows N the generator sees per pair."""
        return self.pool_size if self.strategy == "strategy1" else self.batch_len

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainPair:
    embedding: np.ndarray  # [N, L, C]
    target: np.ndarray  # [N_w, L_w, C_w]
    task_id: str
    step_id: int


def augment_target(values, amplitude, rng, mask=None):
    """Add uniform noise in [-amplitude, amplitude] to the non-pad entries of a grid."""
    if amplitude < 0:
        raise DomainError("amplitude must be >= 0")
    values = np.asarray(values, dtype=np.float32)
    if amplitude == 0:
        return values.copy()
    noise = rng.uniform(-amplitude, amplitude, size=values.shape).astype(np.float32)
    if mask is not None:
        noise = noise * mask
    return values + noise


def mse_loss(pred, target):
    if pred.shape != target.shape:
        raise StructuralError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


class PairSampler:
    """Draws (prompt batch, checkpoint) pairs: task uniformly, then both sides independently.

    Only the embedding and the tokenized target leave the sampler; task and
    step ids ride along for logging and audits.
    """

    def __init__(self, tasks, zoo, encoder, layout: WeightLayout, config: RunConfig):
        if not zoo.task_ids:
            raise DomainError("cannot pair prompts with an empty zoo")
        self.task_ids = list(zoo.task_ids)
        self.datasets = {}
        by_id = {t.task_id: t for t in tasks}
        for tid in self.task_ids:
            if tid not in by_id:
                raise DomainError(f"zoo task {tid!r} has no prompt dataset")
            ds = by_id[tid].train
            if config.pool_size > len(ds):
                raise DomainError(f"task {tid!r} has {len(ds)} prompts, fewer than pool_size {config.pool_size}")
            self.datasets[tid] = ds
        self.targets = {tid: [(c.step_id, encode(c, layout).values) for c in zoo.checkpoints[tid]]
                        for tid in self.task_ids}
        self.encoder, self.layout, self.config = encoder, layout, config
        self.mask = layout.mask().astype(np.float32)

    def sample(self, rng):
        cfg = self.config
        tid = self.task_ids[int(rng.integers(len(self.task_ids)))]
        n = cfg.prompts_per_pair
        batch = sample_prompt_batch(self.datasets[tid], n, cfg.pool_size, rng, cfg.condition_source)
        step_id, grid = self.targets[tid][int(rng.integers(len(self.targets[tid])))]
        return TrainPair(self.encoder.encode_items(batch.prompts), grid, tid, step_id)


def make_pair(sampler, rng):
    return sampler.sample(rng)


class ParameterGenerator:
    """A trained decoder together with everything needed to use it on new prompts."""

    def __init__(self, decoder: HyperDecoder, layout: WeightLayout, encoder, config: RunConfig):
        self.decoder, self.layout, self.encoder, self.config = decoder, layout, encoder, config

    @torch.no_grad()
    def generate_grid(self, prompts):
        if len(prompts) != self.config.prompts_per_pair:
            raise DomainError(f"generator expects {self.config.prompts_per_pair} prompts, got {len(prompts)}")
        emb = torch.from_numpy(self.encoder.encode_items(prompts))
        out = self.decoder(emb[None])[0].numpy()
        return WeightTokenGrid(out, self.layout)

    def generate(self, prompts, task_id="generated"):
        return decode(self.generate_grid(prompts), task_id=task_id)

    def save(self, path):
        meta = {
            "decoder": self.decoder.spec.to_dict(),
            "layout": self.layout.to_dict(),
            "encoder": {"id": self.encoder.encoder_id, "params": self.encoder.params()},
            "run": self.config.to_dict(),
        }
        tensors = {k: v.detach().numpy() for k, v in self.decoder.state_dict().items()}
        return write_tensor_file(path, GEN_MAGIC, meta, tensors)

    @classmethod
    def load(cls, path):
        meta, tensors = read_tensor_file(path, GEN_MAGIC)
        dec = HyperDecoder(DecoderSpec.from_dict(meta["decoder"]))
        dec.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        dec.eval()
        enc = make_encoder(meta["encoder"]["id"], **meta["encoder"]["params"])
        return cls(dec, WeightLayout.from_dict(meta["layout"]), enc, RunConfig(**meta["run"]))


@dataclass
class TraceRow:
    step: int
    loss: float
    grad_norm: float
    clipped_norm: float
    task_ids: str


class GeneratorTrainer:
    """Owns the decoder parameters and optimiser for one training run."""

    def __init__(self, tasks, zoo, encoder, layout, spec: DecoderSpec, config: RunConfig, init_seed=None):
        diag = validate_spec(spec, layout.grid_dims)
        if diag is not None:
            raise ConfigurationError(f"decoder spec rejected before training: {diag}")
        n, l, c = spec.front_dims
        if (n, l, c) != (config.prompts_per_pair, *encoder.out_dims):
            raise ConfigurationError(
                f"decoder front dims {(n, l, c)} do not match prompt rows {config.prompts_per_pair} "
                f"x encoder output {encoder.out_dims}"
            )
        self.sampler = PairSampler(tasks, zoo, encoder, layout, config)
        self.config, self.layout, self.encoder = config, layout, encoder
        self.decoder = HyperDecoder(spec, seed=config.seed if init_seed is None else init_seed)
        self.opt = torch.optim.AdamW(self.decoder.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        self.rng = np.random.default_rng(config.seed)
        self.step_idx = 0
        self.trace: list[TraceRow] = []
        self.seen_tasks = set()

    def step(self):
        cfg = self.config
        pairs = [self.sampler.sample(self.rng) for _ in range(cfg.batch_size)]
        x = torch.from_numpy(np.stack([p.embedding for p in pairs]))
        y = torch.from_numpy(np.stack([
            augment_target(p.target, cfg.noise_amplitude, self.rng, self.sampler.mask) for p in pairs
        ]))
        self.seen_tasks.update(p.task_id for p in pairs)
        self.decoder.train()
        loss = mse_loss(self.decoder(x), y)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"generator loss became non-finite at step {self.step_idx}",
                step=self.step_idx,
                context={"pairs": [(p.task_id, p.step_id) for p in pairs]},
            )
        self.opt.zero_grad()
        loss.backward()
        params = [p for p in self.decoder.parameters() if p.grad is not None]
        norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.max_grad_norm))
        clipped = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(p.grad) for p in params])))
        self.opt.step()
        row = TraceRow(self.step_idx, loss.item(), norm, clipped, ";".join(sorted({p.task_id for p in pairs})))
        self.trace.append(row)
        self.step_idx += 1
        return row

    def _plateaued(self):
        k, w = self.config.early_stop_windows, self.config.window
        if not k or len(self.trace) < (k + 1) * w or len(self.trace) % w:
            return False
        losses = np.array([r.loss for r in self.trace])
        means = losses[: len(losses) // w * w].reshape(-1, w).mean(1)
        return means[-k:].min() > 0.99 * means[:-k].min()

    def run(self, steps=None, callback=None):
        target = self.config.steps if steps is None else self.step_idx + steps
        while self.step_idx < target:
            row = self.step()
            if callback is not None:
                callback(row)
            if self._plateaued():
                log.info("loss plateau at step %d; stopping early", self.step_idx)
                break
        self.decoder.eval()
        return self.generator()

    def generator(self):
        return ParameterGenerator(self.decoder, self.layout, self.encoder, self.config)

    def losses(self):
        return [r.loss for r in self.trace]

    def save_trace(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss", "grad_norm", "clipped_norm"])
            for r in self.trace:
                w.writerow([r.step, repr(r.loss), repr(r.grad_norm), repr(r.clipped_norm)])

    def save_state(self, path):
        torch.save({
            "decoder": self.decoder.state_dict(),
            "opt": self.opt.state_dict(),
            "rng": self.rng.bit_generator.state,
            "step": self.step_idx,
            "trace": [asdict(r) for r in self.trace],
        }, path)

    def load_state(self, path):
        st = torch.load(path, weights_only=False)
        self.decoder.load_state_dict(st["decoder"])
        self.opt.load_state_dict(st["opt"])
        self.rng.bit_generator.state = st["rng"]
        self.step_idx = st["step"]
        self.trace = [TraceRow(**r) for r in st["trace"]]


def default_layout(zoo, token_len=128, row_len=8):
    first = next(iter(zoo.checkpoints.values()))[0]
    return build_layout(first.schema(), token_len, row_len)


def train(tasks, zoo, encoder, spec, config: RunConfig, layout=None, callback=None):
    """Train a generator on ``zoo``; returns (ParameterGenerator, GeneratorTrainer)."""
    layout = layout or default_layout(zoo)
    trainer = GeneratorTrainer(tasks, zoo, encoder, layout, spec, config)
    gen = trainer.run(callback=callback)
    return gen, trainer
