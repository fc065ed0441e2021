"""Message passing on vs. off (zero, frozen kernels) over several seeds.

    python scripts/ablation.py --seeds 0 1 2
"""
import argparse
import dataclasses

from facetree.experiments import ABLATION_SETTINGS, run_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--multitask", type=int, default=ABLATION_SETTINGS.multitask_iterations)
    args = p.parse_args()
    settings = dataclasses.replace(ABLATION_SETTINGS, multitask_iterations=args.multitask)
    pairs = run_ablation(args.seeds, settings, progress=lambda r: print(r.line(), flush=True))
    print()
    print("seed  full_nme%  off_nme%  margin_pp")
    for full, off in pairs:
        print(f"{full.seed:4d}  {100 * full.mean_nme:9.3f}  {100 * off.mean_nme:8.3f}  "
              f"{100 * (off.mean_nme - full.mean_nme):9.3f}")


if __name__ == "__main__":
    main()
