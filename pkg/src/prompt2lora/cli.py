"""Command-line entry point: ``prompt2lora <command> [--config FILE] [--set key=value ...]``.

Artifacts live under the output root (``--out``, else ``output_dir`` in the
config, else ``$PROMPT2LORA_OUTPUT``, else ``./p2l_out``)::

    corpus/<task_id>.jsonl
    zoo/manifest.json, zoo/backbone.bin, zoo/checkpoints/*.lora
    runs/<config hash>/generator.bin, loss.csv, config.json, state.pt, adapters/, report/
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .codec import build_layout
from .decoder import DecoderSpec, desk_spec, validate_spec
from .encoder import make_encoder
from .errors import ConfigurationError, DomainError, Prompt2LoraError
from .evaluation import (EvalReport, aggregate_reports, efficiency_report, evaluate_generator,
                         export_weight_map, generate_adapter, _conditioning_batches)
from .trainer import GeneratorTrainer, ParameterGenerator
from .zoo import task_seed

log = logging.getLogger("prompt2lora")
ENV_OUTPUT = "PROMPT2LORA_OUTPUT"


@contextlib.contextmanager
def run_lock(directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DomainError(f"{directory} is locked by another command (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def output_root(args, cfg):
    return Path(args.out or cfg.get("output_dir") or os.environ.get(ENV_OUTPUT) or "p2l_out")


def split_ids(cfg):
    """(train task ids, test task ids) implied by the eval section."""
    ev, kinds = cfg["eval"], list(cfg["corpus"]["kinds"])
    proto = ev["protocol"]
    if proto == "closeset":
        train = ev["train_tasks"] or kinds
        return train, ev["test_tasks"] or train
    if proto == "openset":
        if ev["train_tasks"] or ev["test_tasks"]:
            test = ev["test_tasks"] or [ev["holdout"]]
            return ev["train_tasks"] or [k for k in kinds if k not in test], test
        return [k for k in kinds if k != ev["holdout"]], [ev["holdout"]]
    if proto == "crossdomain":
        if not ev["train_tasks"] or not ev["test_tasks"]:
            raise ConfigurationError("crossdomain needs eval.train_tasks and eval.test_tasks")
        return ev["train_tasks"], ev["test_tasks"]
    raise ConfigurationError(f"unknown eval.protocol {proto!r}")


GENERATOR_SECTIONS = ("seed", "corpus", "backbone", "zoo", "encoder", "codec", "decoder", "run")


def run_dir(root, cfg):
    """Runs are keyed by everything that shapes the generator, not by eval-only settings."""
    key = {k: cfg[k] for k in GENERATOR_SECTIONS}
    key["train_tasks"] = sorted(split_ids(cfg)[0])
    return root / "runs" / ex.config_hash(key)


def _decoder_spec(cfg, encoder, layout):
    n = ex.run_config(cfg).prompts_per_pair
    if cfg["decoder"].get("spec"):
        spec = DecoderSpec.from_dict(cfg["decoder"]["spec"])
    else:
        spec = desk_spec((n, *encoder.out_dims), layout.grid_dims, cfg["decoder"]["n_blocks"], cfg["decoder"]["kernel"])
    diag = validate_spec(spec, layout.grid_dims)
    if diag is not None:
        raise ConfigurationError(f"pre-flight: {diag}; weight grid is {layout.grid_dims}, "
                                 f"decoder emits {spec.out_dims}")
    return spec


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def cmd_corpus(args, cfg):
    root = output_root(args, cfg)
    paths = ex.write_corpus(ex.build_tasks(cfg), root / "corpus")
    _emit({"corpus": [str(p) for p in paths]})


def cmd_collect_zoo(args, cfg):
    root = output_root(args, cfg)
    tasks = ex.read_corpus(cfg, root / "corpus")
    with run_lock(root / "zoo"):
        zoo = ex.collect_zoo(cfg, tasks)
        manifest = zoo.save(root / "zoo", ex.zoo_recipe(cfg))
    _emit({"manifest": str(root / "zoo" / "manifest.json"), "entries": len(manifest.entries),
           "content_hash": manifest.content_hash()})
    return manifest


def _load_inputs(root, cfg):
    tasks = ex.read_corpus(cfg, root / "corpus")
    if not (root / "zoo" / "manifest.json").exists():
        raise DomainError(f"zoo manifest missing: {root / 'zoo' / 'manifest.json'} (run 'collect-zoo' first)")
    return tasks, ex.load_zoo(root / "zoo")


def cmd_train_generator(args, cfg):
    root = output_root(args, cfg)
    tasks, zoo = _load_inputs(root, cfg)
    train_ids, _ = split_ids(cfg)
    sub = zoo.subset(train_ids)
    enc = make_encoder(cfg["encoder"]["id"], **cfg["encoder"]["params"])
    first = next(iter(sub.checkpoints.values()))[0]
    layout = build_layout(first.schema(), cfg["codec"]["token_len"], cfg["codec"]["row_len"])
    spec = _decoder_spec(cfg, enc, layout)
    rc = ex.run_config(cfg)
    out = run_dir(root, cfg)
    with run_lock(out):
        trainer = GeneratorTrainer(tasks, sub, enc, layout, spec, rc, init_seed=ex.sub_seed(cfg["seed"], "init"))
        (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
        if args.dry_run:
            pair = trainer.sampler.sample(np.random.default_rng(0))
            _emit({"run_dir": str(out), "dry_run": True, "embedding": list(pair.embedding.shape),
                   "target": list(pair.target.shape), "steps": 0})
            return out
        state = out / "state.pt"
        if args.resume:
            if not state.exists():
                raise DomainError(f"--resume given but no saved state at {state}")
            trainer.load_state(state)
        target = args.steps if args.steps is not None else rc.steps
        while trainer.step_idx < target:
            trainer.step()
            if trainer.step_idx % rc.window == 0:
                trainer.save_state(state)
            if trainer._plateaued():
                break
        trainer.decoder.eval()
        trainer.save_state(state)
        trainer.save_trace(out / "loss.csv")
        gen = trainer.generator()
        gen.save(out / "generator.bin")
        (out / "provenance.json").write_text(json.dumps({"checkpoint_tasks_read": sorted(trainer.seen_tasks)}))
    _emit({"run_dir": str(out), "steps": trainer.step_idx, "final_loss": trainer.trace[-1].loss if trainer.trace else None})
    return out


def _load_generator(root, cfg):
    out = run_dir(root, cfg)
    path = out / "generator.bin"
    if not path.exists():
        raise DomainError(f"trained generator missing: {path} (run 'train-generator' first)")
    gen = ParameterGenerator.load(path)
    prov = out / "provenance.json"
    if prov.exists():
        gen.seen_tasks = set(json.loads(prov.read_text())["checkpoint_tasks_read"])
    return out, gen


def cmd_generate(args, cfg):
    root = output_root(args, cfg)
    tasks = {t.task_id: t for t in ex.read_corpus(cfg, root / "corpus")}
    out, gen = _load_generator(root, cfg)
    ids = args.task or split_ids(cfg)[1]
    written = []
    for tid in ids:
        if tid not in tasks:
            raise DomainError(f"task {tid!r} is not in the corpus")
        batch = _conditioning_batches(gen, tasks[tid], 1, task_seed(ex.sub_seed(cfg["seed"], "eval"), tid))[0]
        ck = generate_adapter(gen, batch.prompts, tid)
        written.append(str(ck.save(out / "adapters" / f"{tid}.lora")))
    _emit({"adapters": written})
    return written


def cmd_evaluate(args, cfg):
    root = output_root(args, cfg)
    if args.baselines:
        cfg = ex.apply_overrides(cfg, [f"eval.baselines={json.dumps(args.baselines)}"])
    tasks, zoo = _load_inputs(root, cfg)
    out, gen = _load_generator(root, cfg)
    train_ids, test_ids = split_ids(cfg)
    pc = ex.protocol_config(cfg)
    report = evaluate_generator(gen, zoo, tasks, train_ids, test_ids, cfg["eval"]["protocol"],
                                pc.n_generations, pc.eval_seed, pc.recipe, pc.full_shot, pc.few_shot)
    if "all" in cfg["eval"]["baselines"] or "efficiency" in cfg["eval"]["baselines"]:
        by_id = {t.task_id: t for t in tasks}
        report.timing.update(efficiency_report(gen, zoo.backbone, by_id[test_ids[0]], pc.recipe))
    report.check()
    report.save(out / "report")
    _emit(report.to_dict())
    return report


def cmd_report(args, cfg):
    paths = [Path(p) for p in args.reports]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise DomainError(f"report files not found: {missing}")
    agg = aggregate_reports([EvalReport.load(p) for p in paths])
    if args.output:
        Path(args.output).write_text(json.dumps(agg, indent=2, sort_keys=True))
    _emit(agg)
    return agg


def cmd_weight_map(args, cfg):
    root = output_root(args, cfg)
    tasks, zoo = _load_inputs(root, cfg)
    out, gen = _load_generator(root, cfg)
    by_id = {t.task_id: t for t in tasks}
    _, test_ids = split_ids(cfg)
    generated = []
    for tid in test_ids:
        batch = _conditioning_batches(gen, by_id[tid], 1, task_seed(ex.sub_seed(cfg["seed"], "eval"), tid))[0]
        generated.append(generate_adapter(gen, batch.prompts, tid))
    cks = [c for v in zoo.checkpoints.values() for c in v]
    coords, labels = export_weight_map(cks, generated, out / "weight_map", seed=ex.sub_seed(cfg["seed"], "eval"))
    _emit({"csv": str(out / "weight_map" / "weight_map.csv"), "png": str(out / "weight_map" / "weight_map.png"),
           "points": len(labels)})


def cmd_efficiency(args, cfg):
    root = output_root(args, cfg)
    tasks, zoo = _load_inputs(root, cfg)
    out, gen = _load_generator(root, cfg)
    tid = args.task or split_ids(cfg)[1][0]
    task = {t.task_id: t for t in tasks}[tid]
    timing = efficiency_report(gen, zoo.backbone, task, ex.zoo_recipe(cfg))
    (out / "efficiency.json").write_text(json.dumps(timing, indent=2))
    _emit(timing)
    return timing


COMMANDS = {
    "corpus": cmd_corpus,
    "collect-zoo": cmd_collect_zoo,
    "train-generator": cmd_train_generator,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "weight-map": cmd_weight_map,
    "efficiency": cmd_efficiency,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="prompt2lora", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set run.steps=200")
    common.add_argument("--out", help="output root directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train-generator":
            p.add_argument("--dry-run", action="store_true", help="validate spec and pairing, train 0 steps")
            p.add_argument("--resume", action="store_true", help="continue from the saved state")
            p.add_argument("--steps", type=int, help="stop after this many total steps")
        if name == "generate":
            p.add_argument("--task", action="append", help="task id to generate for (repeatable)")
        if name == "evaluate":
            p.add_argument("--baselines", action="append", choices=["all", "full_shot", "efficiency"])
        if name == "report":
            p.add_argument("reports", nargs="+", help="report.json files to aggregate")
            p.add_argument("--output", help="write the aggregate table here")
        if name == "efficiency":
            p.add_argument("--task")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        cfg = ex.load_config(args.config, args.overrides)
        COMMANDS[args.command](args, cfg)
    except Prompt2LoraError as e:
        record = {"error": e.kind, "command": args.command, "message": str(e)}
        if getattr(e, "step", None) is not None:
            record["step"] = e.step
        print(json.dumps(record), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
