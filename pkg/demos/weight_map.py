"""Embed every collected adapter in 2-D and report how tightly tasks cluster."""

import argparse

from prompt2lora import experiment as ex
from prompt2lora.evaluation import cluster_distances, export_weight_map


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="weight_map_demo")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = ex.load_config(overrides=[f"seed={args.seed}"])
    zoo = ex.collect_zoo(cfg, ex.build_tasks(cfg))
    cks = [c for tid in zoo.task_ids for c in zoo.checkpoints[tid]]
    coords, labels = export_weight_map(cks, [], args.out, seed=args.seed)
    intra, inter = cluster_distances(coords, labels)
    print(f"{len(cks)} adapters; mean distance within a task {intra:.2f}, across tasks {inter:.2f}")
    print(f"plot and coordinates written to {args.out}/")


if __name__ == "__main__":
    main()
