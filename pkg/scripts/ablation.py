"""Run the full model and the five single-switch ablations on the overfit setup.

    python scripts/ablation.py
"""

import argparse

from geocorr.experiments import OverfitConfig, overfit_data, run_overfit
from geocorr.training import trace_hash

ABLATIONS = {
    "full": ({}, {}),
    "no field (one-hot anchors)": ({}, {"use_field": False}),
    "mse instead of contrastive": ({}, {"contrastive": "mse"}),
    "euclidean grouping": ({"grouping": "euclidean"}, {}),
    "no geodesic encoding": ({"geo_encoding": False}, {}),
    "no symmetry loss": ({}, {"lambda_sym": 0.0}),
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--only", nargs="*", help="subset of ablation names")
    args = p.parse_args()

    base = OverfitConfig()
    data = overfit_data(base)
    print(f"{'variant':30s} {'error':>7s} {'acc':>6s} {'flip':>7s} {'msim':>7s} {'pearson':>8s}  trace")
    for name, (desc, train) in ABLATIONS.items():
        if args.only and name not in args.only:
            continue
        cfg = OverfitConfig(descriptor={**base.descriptor, **desc}, train={**base.train, **train})
        r = run_overfit(cfg, data)
        print(
            f"{name:30s} {r['mean_error']:7.2f} {r['mean_accuracy']:6.3f} {r['mean_flip_rate']:7.4f} "
            f"{r['mean_masked_similarity']:+7.3f} {r['pearson']:8.3f}  {trace_hash(r['trace'])[:12]}"
        )


if __name__ == "__main__":
    main()
