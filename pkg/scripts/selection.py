"""Selection frequencies of nested candidates as the sample size grows."""

import argparse

from msmic.pipeline import FitRecipe
from msmic.sim import ac2_dgp_with_v, selection_experiment

KINDS = ["QICW", "IPWIC2", "OBS-WEIGHT-IC"]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--N", type=int, nargs="+", default=[250, 1000, 4000])
    ap.add_argument("--M", type=int, default=500)
    ap.add_argument("--seed", type=int, default=15)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args(argv)

    cands = [(0,), (0, 1), (0, 1, 2)]
    print(f"seed: {args.seed}  M: {args.M}  true structure: 1+arm2")
    for n in args.N:
        table = selection_experiment(ac2_dgp_with_v(), FitRecipe("IPW-unknown"), cands, KINDS,
                                     n, args.M, args.seed, args.jobs)
        print(f"N = {n}")
        for kind in KINDS:
            freqs = "  ".join(f"{c}: {table.frequency(kind, c):.3f}" for c in table.candidates)
            print(f"  {kind:14s} {freqs}")


if __name__ == "__main__":
    main()
