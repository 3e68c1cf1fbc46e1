"""Synthetic string-transformation tasks used as stand-in datasets.

Each task kind has a prompt template, a generator for its free content and
an independent rule checker that re-derives the answer from the prompt text
alone.  Prompts use lowercase ASCII, digits and a little punctuation and are
never longer than 32 characters.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError

MAX_PROMPT_LEN = 32
CONDITION_SOURCES = ("prompt_only", "prompt_plus_answer", "mixed")
LETTERS = "abcdefghijklmnopqrstuvwxyz"
VOWELS = set("aeiou")


def _letters(rng, lo, hi):
    n = int(rng.integers(lo, hi + 1))
    return "".join(rng.choice(list(LETTERS), size=n))


def _digits(rng, lo, hi, alphabet="0123456789"):
    n = int(rng.integers(lo, hi + 1))
    return "".join(rng.choice(list(alphabet), size=n))


@dataclass(frozen=True)
class TaskKind:
    name: str
    pattern: re.Pattern
    make_content: object  # rng -> content string
    render: object  # content -> prompt
    rule: object  # regex match -> answer


def _add_content(rng):
    a, b = rng.integers(0, 100, size=2)
    return f"{a}+{b}"


TASK_KINDS = {
    "reverse": TaskKind(
        "reverse",
        re.compile(r"reverse: ([a-z]+)"),
        lambda rng: _letters(rng, 3, 6),
        lambda c: f"reverse: {c}",
        lambda m: m.group(1)[::-1],
    ),
    "copy": TaskKind(
        "copy",
        re.compile(r"copy: ([a-z]+)"),
        lambda rng: _letters(rng, 3, 6),
        lambda c: f"copy: {c}",
        lambda m: m.group(1),
    ),
    "sort_digits": TaskKind(
        "sort_digits",
        re.compile(r"sort: ([0-9]+)"),
        lambda rng: _digits(rng, 4, 6),
        lambda c: f"sort: {c}",
        lambda m: "".join(sorted(m.group(1))),
    ),
    "parity": TaskKind(
        "parity",
        re.compile(r"parity: ([01]+)"),
        lambda rng: _digits(rng, 4, 10, "01"),
        lambda c: f"parity: {c}",
        lambda m: "odd" if m.group(1).count("1") % 2 else "even",
    ),
    "mod_add": TaskKind(
        "mod_add",
        re.compile(r"add: ([0-9]+)\+([0-9]+) mod 10"),
        _add_content,
        lambda c: f"add: {c} mod 10",
        lambda m: str((int(m.group(1)) + int(m.group(2))) % 10),
    ),
    "uppercase": TaskKind(
        "uppercase",
        re.compile(r"upper: ([a-z]+)"),
        lambda rng: _letters(rng, 3, 6),
        lambda c: f"upper: {c}",
        lambda m: m.group(1).upper(),
    ),
    "vowel_count": TaskKind(
        "vowel_count",
        re.compile(r"vowels: ([a-z]+)"),
        lambda rng: _letters(rng, 4, 8),
        lambda c: f"vowels: {c}",
        lambda m: str(sum(ch in VOWELS for ch in m.group(1))),
    ),
}

DEFAULT_TASKS = ("reverse", "copy", "sort_digits", "mod_add", "uppercase")
STRING_FAMILY = ("reverse", "copy", "uppercase")
ARITHMETIC_FAMILY = ("sort_digits", "parity", "mod_add", "vowel_count")


def get_kind(kind):
    try:
        return TASK_KINDS[kind]
    except KeyError:
        raise ConfigurationError(
            f"unknown task kind {kind!r}; expected one of {sorted(TASK_KINDS)}"
        ) from None


def solve(kind, prompt):
    """Answer ``prompt`` by parsing it against the template of ``kind``.

    Returns None when the prompt does not follow the template.
    """
    m = get_kind(kind).pattern.fullmatch(prompt)
    return None if m is None else get_kind(kind).rule(m)


def check_sample(kind, prompt, answer):
    return solve(kind, prompt) == answer


def infer_kind(prompt):
    for name, spec in TASK_KINDS.items():
        if spec.pattern.fullmatch(prompt):
            return name
    return None


@dataclass
class TaskDataset:
    """One split of a task: aligned prompts and answers."""

    task_id: str
    kind: str
    prompts: list
    answers: list
    split: str = "train"

    def __post_init__(self):
        if len(self.prompts) != len(self.answers):
            raise DomainError("prompts and answers must be aligned")
        if self.split not in ("train", "test"):
            raise DomainError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self):
        return len(self.prompts)

    def validate(self):
        return all(check_sample(self.kind, p, a) for p, a in zip(self.prompts, self.answers))


@dataclass
class Task:
    """A named task with its disjoint train and test splits."""

    task_id: str
    kind: str
    train: TaskDataset
    test: TaskDataset

    def split(self, name):
        if name == "train":
            return self.train
        if name == "test":
            return self.test
        raise DomainError(f"unknown split {name!r}")

    def renamed(self, task_id):
        return Task(
            task_id,
            self.kind,
            TaskDataset(task_id, self.kind, list(self.train.prompts), list(self.train.answers), "train"),
            TaskDataset(task_id, self.kind, list(self.test.prompts), list(self.test.answers), "test"),
        )


@dataclass
class PromptBatch:
    task_id: str
    prompts: list
    condition_source: str = "prompt_only"
    indices: list = field(default_factory=list)

    def __len__(self):
        return len(self.prompts)


def make_task(kind, n_samples, seed, task_id=None):
    """Build ``n_samples`` unique samples of ``kind`` split 90/10 into train/test."""
    spec = get_kind(kind)
    if n_samples < 2:
        raise DomainError(f"n_samples must be >= 2, got {n_samples}")
    rng = np.random.default_rng([seed, sorted(TASK_KINDS).index(kind)])
    seen = set()
    prompts = []
    attempts = 0
    while len(prompts) < n_samples:
        attempts += 1
        if attempts > 50 * n_samples + 1000:
            raise DomainError(f"task {kind!r} cannot supply {n_samples} unique prompts")
        p = spec.render(spec.make_content(rng))
        if p in seen:
            continue
        seen.add(p)
        prompts.append(p)
    answers = [solve(kind, p) for p in prompts]
    n_test = max(1, int(round(0.1 * n_samples)))
    n_train = n_samples - n_test
    task_id = task_id or kind
    return Task(
        task_id,
        kind,
        TaskDataset(task_id, kind, prompts[:n_train], answers[:n_train], "train"),
        TaskDataset(task_id, kind, prompts[n_train:], answers[n_train:], "test"),
    )


def make_tasks(kinds=DEFAULT_TASKS, n_samples=1000, seed=0):
    return [make_task(k, n_samples, seed) for k in kinds]


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_prompt_batch(dataset, batch_len, pool_size, seed, condition_source="prompt_only"):
    """Draw ``batch_len`` distinct items uniformly from the first ``pool_size`` prompts.

    With ``batch_len == pool_size`` this degenerates to the whole pool in a
    random order (fixed-pool pairing).
    """
    if condition_source not in CONDITION_SOURCES:
        raise ConfigurationError(f"unknown condition_source {condition_source!r}")
    if batch_len < 1:
        raise DomainError("batch_len must be >= 1")
    if pool_size > len(dataset.prompts):
        raise DomainError(
            f"pool_size {pool_size} exceeds the {len(dataset.prompts)} available prompts"
        )
    if batch_len > pool_size:
        raise DomainError(f"batch_len {batch_len} exceeds pool_size {pool_size}")
    rng = _as_rng(seed)
    idx = rng.choice(pool_size, size=batch_len, replace=False).tolist()
    if condition_source == "prompt_only":
        items = [dataset.prompts[i] for i in idx]
    elif condition_source == "prompt_plus_answer":
        items = [f"{dataset.prompts[i]} = {dataset.answers[i]}" for i in idx]
    else:
        n_prompt = math.ceil(0.8 * batch_len)
        items = [dataset.prompts[i] for i in idx[:n_prompt]]
        items += [dataset.answers[i] for i in idx[n_prompt:]]
    return PromptBatch(dataset.task_id, items, condition_source, idx)


def partition_prompts(dataset, batch_len, seed=0):
    """Split the prompt indices into non-overlapping batches (last one may be short)."""
    if batch_len < 1:
        raise DomainError("batch_len must be >= 1")
    order = _as_rng(seed).permutation(len(dataset.prompts))
    return [order[i : i + batch_len].tolist() for i in range(0, len(order), batch_len)]


def fingerprint_separability(tasks, encoder):
    """Held-out task identification accuracy of a nearest-centroid classifier.

    Each prompt is mean-pooled to one vector; centroids come from the train
    splits and accuracy is measured on the test splits.  Ties go to the
    earliest task, so indistinguishable tasks score 1/len(tasks).
    """
    if len(tasks) < 2:
        raise DomainError("fingerprint_separability needs at least 2 tasks")
    centroids = []
    for t in tasks:
        centroids.append(encoder.encode_items(t.train.prompts).mean(axis=(0, 1)))
    centroids = np.stack(centroids)
    correct = total = 0
    for label, t in enumerate(tasks):
        pooled = encoder.encode_items(t.test.prompts).mean(axis=1)
        d = ((pooled[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
        correct += int((d.argmin(axis=1) == label).sum())
        total += len(pooled)
    return correct / total


def save_task(task, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for ds in (task.train, task.test):
            for p, a in zip(ds.prompts, ds.answers):
                f.write(json.dumps({"task_id": task.task_id, "prompt": p, "answer": a, "split": ds.split}) + "\n")
    return path


def load_task(path):
    path = Path(path)
    if not path.exists():
        raise DomainError(f"corpus file not found: {path}")
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    if not rows:
        raise DomainError(f"corpus file is empty: {path}")
    task_id = rows[0]["task_id"]
    kind = infer_kind(rows[0]["prompt"])
    if kind is None:
        raise DomainError(f"{path}: prompt {rows[0]['prompt']!r} matches no task template")
    by_split = {"train": ([], []), "test": ([], [])}
    for r in rows:
        by_split[r["split"]][0].append(r["prompt"])
        by_split[r["split"]][1].append(r["answer"])
    return Task(
        task_id,
        kind,
        TaskDataset(task_id, kind, *by_split["train"], "train"),
        TaskDataset(task_id, kind, *by_split["test"], "test"),
    )
