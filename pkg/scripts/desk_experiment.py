"""Train the desk model on synthetic faces and report held-out NME and pose error.

    python scripts/desk_experiment.py --seed 0 --out runs/desk
"""
import argparse
import csv
import dataclasses
import json
from pathlib import Path

from facetree.experiments import DeskSettings, run_desk


def main():
    defaults = DeskSettings()
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pretrain", type=int, default=defaults.pretrain_iterations)
    p.add_argument("--multitask", type=int, default=defaults.multitask_iterations)
    p.add_argument("--lr", type=float, default=defaults.learning_rate)
    p.add_argument("--train-size", type=int, default=defaults.train_size)
    p.add_argument("--no-messages", action="store_true", help="zero and freeze the message kernels")
    p.add_argument("--out", default="runs/desk")
    args = p.parse_args()

    settings = dataclasses.replace(defaults, pretrain_iterations=args.pretrain, multitask_iterations=args.multitask,
                                   learning_rate=args.lr, train_size=args.train_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss.csv", "w", newline="") as fh:
        log = csv.writer(fh)
        log.writerow(["phase", "iteration", "L0", "L1", "L2", "L3", "total"])

        def progress(phase, it, values):
            log.writerow([phase, it, *(f"{v:.6g}" for v in values)])
            if it % 250 == 0:
                print(phase, it, " ".join(f"{v:.4g}" for v in values), flush=True)

        result = run_desk(args.seed, settings, message_passing=not args.no_messages, progress=progress)
    print(result.line())
    summary = {"settings": dataclasses.asdict(settings), "seed": args.seed,
               "message_passing": not args.no_messages, "mean_nme": result.mean_nme,
               "heatmap_nme": result.heatmap_nme, "pose_mae": list(map(float, result.pose_mae)),
               "seconds": result.seconds}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
