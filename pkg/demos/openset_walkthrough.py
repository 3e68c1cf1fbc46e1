"""Train a generator on four tasks' adapters and generate one for the fifth.

Prints, for the held-out task, accuracy of the generated adapter next to the
frozen backbone and the average of the training adapters.  Takes a few
minutes on a CPU.
"""

import argparse

from prompt2lora import experiment as ex
from prompt2lora.evaluation import openset_protocol


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--holdout", default="mod_add")
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = ex.load_config(overrides=[f"seed={args.seed}", f"run.steps={args.steps}"])
    tasks = ex.build_tasks(cfg)
    print("pretraining the backbone and collecting the adapter zoo ...")
    zoo = ex.collect_zoo(cfg, tasks)
    report = openset_protocol(tasks, zoo, args.holdout, ex.protocol_config(cfg))
    row = report.accuracy[args.holdout]
    print(f"trained on {report.train_tasks}, tested on {args.holdout}")
    for col in ("base", "training_avg", "generated"):
        print(f"  {col:>13}: {row[col]:.3f}")
    print(f"  improvement over the training-adapter average: {report.improvement(args.holdout):+.3f}")


if __name__ == "__main__":
    main()
