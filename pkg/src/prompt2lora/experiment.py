"""Declarative experiment configs and the glue that turns one into artifacts.

All randomness in a run is derived from the single top-level ``seed`` via
named sub-seeds (``corpus``, ``backbone``, ``zoo``, ``pairing``, ``init``,
``eval``), so changing one stage's stream never perturbs another's.
"""

from __future__ import annotations

import copy
import hashlib
import json
import zlib
from pathlib import Path

from .backbone import BackboneConfig, train_backbone
from .errors import ConfigurationError, DomainError
from .evaluation import ProtocolConfig
from .tasks import DEFAULT_TASKS, TASK_KINDS, load_task, make_task, save_task
from .trainer import RunConfig
from .zoo import PhaseRecipe, Zoo, ZooRecipe, build_zoo

DEFAULT_CONFIG = {
    "seed": 0,
    "corpus": {"kinds": list(DEFAULT_TASKS), "n_samples": 1000},
    "backbone": {
        "n_layers": 2, "d": 64, "n_heads": 4, "context_len": 48,
        "pretrain_kinds": sorted(TASK_KINDS), "steps": 1500, "lr": 3e-3, "batch_size": 64,
    },
    "zoo": {
        "pretrain": {"lr": 1e-2, "steps": 300},
        "finetune": {"lr": 1e-3, "steps": 20},
        "batch_size": 32, "rank": 4,
    },
    "encoder": {"id": "hashed-trigram", "params": {}},
    "codec": {"token_len": 128, "row_len": 8},
    "decoder": {"n_blocks": 4, "kernel": 3},
    "run": {
        "lr": 1e-3, "weight_decay": 0.1, "max_grad_norm": 1.0, "steps": 500, "batch_size": 8,
        "noise_amplitude": 1e-4, "strategy": "strategy2", "pool_size": 256, "batch_len": 16,
        "condition_source": "prompt_only", "early_stop_windows": 0, "window": 100,
    },
    "eval": {
        "protocol": "openset", "holdout": "mod_add", "train_tasks": None, "test_tasks": None,
        "n_generations": 3, "baselines": [], "few_shot": [],
    },
    "output_dir": None,
}


def sub_seed(seed, name):
    return (int(seed) * 1_000_003 + zlib.crc32(name.encode())) % (2**31)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg, overrides):
    """Apply ``key.sub=value`` strings; values are parsed as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, val = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigurationError(f"override {key!r}: {p!r} is not a config section")
            node = node[p]
        node[parts[-1]] = _parse_value(val)
    return cfg


def load_config(path=None, overrides=()):
    cfg = DEFAULT_CONFIG
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file not found: {p}")
        cfg = _merge(cfg, json.loads(p.read_text()))
    cfg = apply_overrides(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    kinds = cfg["corpus"]["kinds"]
    for k in kinds + list(cfg["backbone"]["pretrain_kinds"]):
        if k not in TASK_KINDS:
            raise ConfigurationError(f"unknown task kind {k!r}")
    ev = cfg["eval"]
    for key in ("train_tasks", "test_tasks"):
        for t in ev.get(key) or []:
            if t not in kinds:
                raise ConfigurationError(f"eval.{key} names {t!r}, which is not in corpus.kinds")
    if ev.get("holdout") is not None and ev["protocol"] == "openset" and ev["holdout"] not in kinds:
        raise ConfigurationError(f"eval.holdout {ev['holdout']!r} is not in corpus.kinds")
    run_config(cfg)
    return cfg


def config_hash(cfg, sections=None):
    """Stable under key reordering; ``sections`` restricts which top-level keys count."""
    body = cfg if sections is None else {k: cfg[k] for k in sections}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def backbone_config(cfg):
    b = cfg["backbone"]
    return BackboneConfig(n_layers=b["n_layers"], d=b["d"], n_heads=b["n_heads"],
                          context_len=b["context_len"], seed=sub_seed(cfg["seed"], "backbone"))


def zoo_recipe(cfg):
    z = cfg["zoo"]
    return ZooRecipe(PhaseRecipe(**z["pretrain"]), PhaseRecipe(**z["finetune"]),
                     z["batch_size"], z["rank"], sub_seed(cfg["seed"], "zoo"))


def run_config(cfg):
    allowed = set(RunConfig.__dataclass_fields__) - {"seed"}
    unknown = set(cfg["run"]) - allowed
    if unknown:
        raise ConfigurationError(f"unknown run settings {sorted(unknown)}; the pairing seed derives from the top-level seed")
    return RunConfig(**cfg["run"], seed=sub_seed(cfg["seed"], "pairing"))


def protocol_config(cfg):
    ev = cfg["eval"]
    return ProtocolConfig(
        run=run_config(cfg), encoder_id=cfg["encoder"]["id"], encoder_params=dict(cfg["encoder"]["params"]),
        token_len=cfg["codec"]["token_len"], row_len=cfg["codec"]["row_len"],
        n_blocks=cfg["decoder"]["n_blocks"], kernel=cfg["decoder"]["kernel"],
        n_generations=ev["n_generations"], eval_seed=sub_seed(cfg["seed"], "eval"),
        init_seed=sub_seed(cfg["seed"], "init"),
        full_shot="full_shot" in ev["baselines"] or "all" in ev["baselines"],
        few_shot=tuple(ev["few_shot"]) or ((16,) if "all" in ev["baselines"] else ()),
        recipe=zoo_recipe(cfg),
    )


def build_tasks(cfg):
    return [make_task(k, cfg["corpus"]["n_samples"], sub_seed(cfg["seed"], "corpus")) for k in cfg["corpus"]["kinds"]]


def build_backbone(cfg):
    b = cfg["backbone"]
    seed = sub_seed(cfg["seed"], "backbone")
    corpus = [make_task(k, cfg["corpus"]["n_samples"], seed) for k in b["pretrain_kinds"]]
    return train_backbone(backbone_config(cfg), corpus, b["steps"], b["lr"], b["batch_size"], seed)


def write_corpus(tasks, root):
    root = Path(root)
    return [save_task(t, root / f"{t.task_id}.jsonl") for t in tasks]


def read_corpus(cfg, root):
    root = Path(root)
    tasks = []
    for k in cfg["corpus"]["kinds"]:
        path = root / f"{k}.jsonl"
        if not path.exists():
            raise DomainError(f"corpus file missing: {path} (run the 'corpus' command first)")
        tasks.append(load_task(path))
    return tasks


def collect_zoo(cfg, tasks, zoo_tasks=None, backbone=None):
    backbone = backbone or build_backbone(cfg)
    chosen = [t for t in tasks if zoo_tasks is None or t.task_id in zoo_tasks]
    return build_zoo(backbone, chosen, zoo_recipe(cfg))


def load_zoo(root):
    return Zoo.load(root)
