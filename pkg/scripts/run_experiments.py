"""Run the full multi-seed pipeline through the CLI and print the median trends.

    python scripts/run_experiments.py --config configs/acceptance.yaml --seeds 0 1 2 --out runs/trends
"""
import argparse
import json

from hyperv2x.experiments import run_seeds, summarize


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/acceptance.yaml")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", default="runs/trends")
    args = p.parse_args()
    runs = run_seeds(args.config, args.seeds, args.out)
    print(json.dumps(summarize(runs), indent=2))


if __name__ == "__main__":
    main()
