"""Inference protocol, train/test arrangements, baselines, timing and weight maps."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .decoder import desk_spec
from .encoder import make_encoder
from .errors import DomainError
from .tasks import sample_prompt_batch
from .trainer import GeneratorTrainer, RunConfig, default_layout
from .zoo import ZooRecipe, collect_checkpoints, evaluate, task_seed, train_lora


@dataclass
class ProtocolConfig:
    run: RunConfig = field(default_factory=RunConfig)
    encoder_id: str = "hashed-trigram"
    encoder_params: dict = field(default_factory=dict)
    token_len: int = 128
    row_len: int = 8
    n_blocks: int = 4
    kernel: int = 3
    n_generations: int = 3
    eval_seed: int = 0
    init_seed: int = 0
    full_shot: bool = False
    few_shot: tuple = ()
    recipe: ZooRecipe = field(default_factory=ZooRecipe)


def generate_adapter(generator, prompts, task_id="generated"):
    """One forward pass from unlabeled prompts to a decoded adapter."""
    n = generator.config.prompts_per_pair
    if len(prompts) != n:
        raise DomainError(f"generator was trained on batches of {n} prompts, got {len(prompts)}")
    return generator.generate(list(prompts), task_id=task_id)


def _conditioning_batches(generator, task, n, seed):
    cfg = generator.config
    rng = np.random.default_rng(seed)
    pool = min(cfg.pool_size, len(task.train))
    return [sample_prompt_batch(task.train, cfg.prompts_per_pair, pool, rng, cfg.condition_source) for _ in range(n)]


@dataclass
class EvalReport:
    scenario: str
    train_tasks: list
    test_tasks: list
    accuracy: dict  # test task -> column -> value (adapters nested by training task)
    timing: dict = field(default_factory=dict)
    pairing: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def improvement(self, task_id):
        row = self.accuracy[task_id]
        return row["generated"] - row["training_avg"]

    def mean_improvement(self):
        return float(np.mean([self.improvement(t) for t in self.test_tasks]))

    def check(self):
        """Raise if an accuracy is out of range, an average is stale, or a holdout leaked."""
        for tid, row in self.accuracy.items():
            vals = [v for k, v in row.items() if k != "adapters" and v is not None]
            vals += list(row.get("adapters", {}).values())
            if any(not 0.0 <= v <= 1.0 for v in vals):
                raise DomainError(f"{tid}: accuracy outside [0, 1]")
            adapters = row.get("adapters", {})
            if adapters and abs(np.mean(list(adapters.values())) - row["training_avg"]) > 1e-9:
                raise DomainError(f"{tid}: training_avg does not equal the mean of adapter accuracies")
        if self.scenario != "closeset":
            leaked = set(self.provenance.get("checkpoint_tasks_read", [])) & set(self.test_tasks)
            if leaked:
                raise DomainError(f"holdout checkpoints were read during generator training: {sorted(leaked)}")
        return True

    def to_dict(self):
        d = asdict(self)
        d["improvement"] = {t: self.improvement(t) for t in self.test_tasks}
        d["mean_improvement"] = self.mean_improvement()
        return d

    @classmethod
    def from_dict(cls, d):
        keys = ("scenario", "train_tasks", "test_tasks", "accuracy", "timing", "pairing", "seeds", "provenance")
        return cls(**{k: d[k] for k in keys})

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        cols = ["generated", "training_avg", "base", "full_shot"]
        few = sorted({k for r in self.accuracy.values() for k in r if k.startswith("few_shot_")})
        with open(out / "accuracy.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["test_task", *cols, *few, "improvement"])
            for t in self.test_tasks:
                r = self.accuracy[t]
                w.writerow([t, *[r.get(c) for c in cols + few], self.improvement(t)])
        with open(out / "adapters.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["test_task", "adapter_task", "accuracy"])
            for t in self.test_tasks:
                for a, v in self.accuracy[t].get("adapters", {}).items():
                    w.writerow([t, a, v])
        if self.timing:
            with open(out / "timing.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(list(self.timing))
                w.writerow(list(self.timing.values()))
        return out

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def evaluate_generator(generator, zoo, tasks, train_ids, test_ids, scenario="openset",
                       n_generations=3, eval_seed=0, recipe=None, full_shot=False, few_shot=()):
    """Score generated adapters on ``test_ids`` against the training adapters and the base model.

    Generated accuracy is averaged over ``n_generations`` independently drawn
    prompt batches.  Training adapters are the last saved checkpoint of each
    training task.
    """
    by_id = {t.task_id: t for t in tasks}
    bb = zoo.backbone
    acc = {}
    for tid in test_ids:
        task = by_id[tid]
        batches = _conditioning_batches(generator, task, n_generations, task_seed(eval_seed, tid))
        gen_accs = [evaluate(bb, generate_adapter(generator, b.prompts, tid), task) for b in batches]
        adapters = {a: evaluate(bb, zoo.final(a), task) for a in train_ids}
        row = {
            "generated": float(np.mean(gen_accs)),
            "training_avg": float(np.mean(list(adapters.values()))),
            "base": evaluate(bb, None, task),
            "full_shot": None,
            "adapters": adapters,
        }
        if full_shot and recipe is not None:
            ck = collect_checkpoints(bb, task.train, recipe.pretrain, recipe.finetune,
                                     recipe.batch_size, task_seed(recipe.seed, tid), recipe.rank)[-1]
            row["full_shot"] = evaluate(bb, ck, task)
        for k in few_shot:
            if recipe is None:
                break
            sub = type(task.train)(tid, task.kind, task.train.prompts[:k], task.train.answers[:k], "train")
            ck = train_lora(bb, sub, recipe.pretrain.lr, recipe.pretrain.steps, min(recipe.batch_size, k),
                            task_seed(recipe.seed, tid), recipe.rank)
            row[f"few_shot_{k}"] = evaluate(bb, ck, task)
        acc[tid] = row
    cfg = generator.config
    report = EvalReport(
        scenario, list(train_ids), list(test_ids), acc,
        pairing={"strategy": cfg.strategy, "pool_size": cfg.pool_size, "batch_len": cfg.batch_len,
                 "condition_source": cfg.condition_source},
        seeds={"pairing": cfg.seed, "eval": eval_seed},
        provenance={
            "checkpoint_tasks_read": sorted(getattr(generator, "seen_tasks", train_ids)),
            "answers_read": sorted(test_ids) if cfg.condition_source != "prompt_only" else [],
        },
    )
    return report


def train_generator(tasks, zoo, train_ids, config: ProtocolConfig):
    """Fit a generator on the checkpoints of ``train_ids`` only."""
    sub = zoo.subset(train_ids)
    enc = make_encoder(config.encoder_id, **config.encoder_params)
    layout = default_layout(sub, config.token_len, config.row_len)
    spec = desk_spec((config.run.prompts_per_pair, *enc.out_dims), layout.grid_dims, config.n_blocks, config.kernel)
    trainer = GeneratorTrainer(tasks, sub, enc, layout, spec, config.run, init_seed=config.init_seed)
    t0 = time.perf_counter()
    gen = trainer.run()
    gen.seen_tasks = set(trainer.seen_tasks)
    gen.losses = trainer.losses()
    gen.train_seconds = time.perf_counter() - t0
    return gen, trainer


def arrangement_protocol(tasks, zoo, train_ids, test_ids, config: ProtocolConfig, scenario="arrangement"):
    """Train on ``train_ids`` checkpoints, evaluate generation on disjoint ``test_ids``."""
    train_ids, test_ids = list(train_ids), list(test_ids)
    if len(train_ids) < 1:
        raise DomainError("at least one training task is required")
    if set(train_ids) & set(test_ids):
        raise DomainError(f"train and test tasks overlap: {sorted(set(train_ids) & set(test_ids))}")
    gen, trainer = train_generator(tasks, zoo, train_ids, config)
    report = evaluate_generator(gen, zoo, tasks, train_ids, test_ids, scenario, config.n_generations,
                                config.eval_seed, config.recipe, config.full_shot, config.few_shot)
    report.timing["generator_train_seconds"] = gen.train_seconds
    report.check()
    return report


def openset_protocol(tasks, zoo, holdout, config: ProtocolConfig, train_ids=None):
    ids = [t.task_id for t in tasks if t.task_id in zoo.task_ids]
    if holdout not in [t.task_id for t in tasks]:
        raise DomainError(f"holdout {holdout!r} is not among the tasks")
    train_ids = [t for t in (train_ids or ids) if t != holdout]
    return arrangement_protocol(tasks, zoo, train_ids, [holdout], config, "openset")


def closeset_protocol(tasks, zoo, train_ids, config: ProtocolConfig):
    """Generate adapters for the very tasks the generator was trained on."""
    gen, _ = train_generator(tasks, zoo, train_ids, config)
    report = evaluate_generator(gen, zoo, tasks, train_ids, train_ids, "closeset",
                                config.n_generations, config.eval_seed)
    for tid in train_ids:
        report.accuracy[tid]["source"] = evaluate(zoo.backbone, zoo.final(tid), {t.task_id: t for t in tasks}[tid])
    report.timing["generator_train_seconds"] = gen.train_seconds
    report.check()
    return report, gen


def crossdomain_protocol(tasks, zoo, train_family, test_family, config: ProtocolConfig):
    kinds = {t.task_id: t.kind for t in tasks}
    overlap = {kinds[t] for t in train_family} & {kinds[t] for t in test_family}
    if overlap:
        raise DomainError(f"task families share kinds {sorted(overlap)}")
    return arrangement_protocol(tasks, zoo, train_family, test_family, config, "crossdomain")


def rotations(task_ids, n_train):
    """Cyclic train/test splits: rotation i trains on ids i .. i+n_train-1 (mod n)."""
    n = len(task_ids)
    out = []
    for i in range(n):
        tr = [task_ids[(i + j) % n] for j in range(n_train)]
        out.append((tr, [t for t in task_ids if t not in tr]))
    return out


def aggregate_reports(reports):
    """Mean and std of per-report mean improvement and of each accuracy column."""
    imps = np.array([r.mean_improvement() for r in reports])
    cols = {}
    for c in ("generated", "training_avg", "base"):
        vals = np.array([np.mean([r.accuracy[t][c] for t in r.test_tasks]) for r in reports])
        cols[c] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return {
        "n_runs": len(reports),
        "mean_improvement": {"mean": float(imps.mean()), "std": float(imps.std())},
        "columns": cols,
        "runs": [{"train": r.train_tasks, "test": r.test_tasks, "improvement": r.mean_improvement()} for r in reports],
    }


def efficiency_report(generator, backbone, task, recipe: ZooRecipe, seed=0):
    """Wall-clock of one generation versus LoRA tuning under ``recipe`` on the same machine."""
    rng = np.random.default_rng(seed)
    cfg = generator.config
    batch = sample_prompt_batch(task.train, cfg.prompts_per_pair, min(cfg.pool_size, len(task.train)), rng)
    enc = generator.encoder
    t0 = time.perf_counter()
    enc.encode_items(batch.prompts)
    warm = time.perf_counter() - t0
    generate_adapter(generator, batch.prompts, task.task_id)  # first call pays torch dispatch warm-up
    t0 = time.perf_counter()
    generate_adapter(generator, batch.prompts, task.task_id)
    gen_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    collect_checkpoints(backbone, task.train, recipe.pretrain, recipe.finetune, recipe.batch_size,
                        task_seed(recipe.seed, task.task_id), recipe.rank)
    tune_s = time.perf_counter() - t0
    return {"generation_seconds": gen_s, "encoder_warmup_seconds": warm,
            "tuning_seconds": tune_s, "speedup_ratio": tune_s / gen_s}


def weight_map(checkpoints, generated=(), seed=0):
    """2-D t-SNE coordinates of flattened adapters; returns (coords, labels)."""
    from sklearn.manifold import TSNE

    items = [(c.task_id, c.flat()) for c in checkpoints]
    items += [(f"generated:{c.task_id}", c.flat()) for c in generated]
    if len(items) < 3:
        raise DomainError("a weight map needs at least 3 adapters")
    X = np.stack([v for _, v in items]).astype(np.float64)
    perplexity = float(min(30.0, max(1.0, (len(X) - 1) / 3)))
    coords = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(X)
    return coords, [lab for lab, _ in items]


def cluster_distances(coords, labels):
    """(mean intra-label distance, mean inter-label distance) over original adapters."""
    idx = [i for i, l in enumerate(labels) if not l.startswith("generated:")]
    pts = coords[idx]
    labs = np.array([labels[i] for i in idx])
    d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    same = labs[:, None] == labs[None]
    off = ~np.eye(len(pts), dtype=bool)
    return float(d[same & off].mean()), float(d[~same].mean())


def nearest_centroid(coords, labels, label):
    """Original-task centroid closest to the mean position of ``label``."""
    labels = np.array(labels)
    target = coords[labels == label].mean(0)
    names = sorted({l for l in labels if not l.startswith("generated:")})
    dists = {n: float(np.linalg.norm(coords[labels == n].mean(0) - target)) for n in names}
    return min(dists, key=dists.get), dists


def export_weight_map(checkpoints, generated, out_dir, seed=0):
    """Write ``weight_map.csv`` and ``weight_map.png``; returns (coords, labels)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    coords, labels = weight_map(checkpoints, generated, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "weight_map.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "x", "y"])
        for lab, (x, y) in zip(labels, coords):
            w.writerow([lab, float(x), float(y)])
    fig, ax = plt.subplots(figsize=(6, 5))
    for lab in dict.fromkeys(labels):
        m = np.array([l == lab for l in labels])
        marker = "*" if lab.startswith("generated:") else "o"
        ax.scatter(coords[m, 0], coords[m, 1], s=80 if marker == "*" else 14, marker=marker, label=lab)
    ax.legend(fontsize=7, loc="best")
    ax.set_title("adapter weight space (t-SNE)")
    fig.tight_layout()
    fig.savefig(out / "weight_map.png", dpi=120)
    plt.close(fig)
    return coords, labels
