"""Random hyperparameter search for the restoration task on a synthetic volume.

Each trial is scored by k-fold cross-validated masked RMSE; the ranked trial
log is written as JSON.

    python3 scripts/search_sweep.py --budget 8 --epochs 2 --cv 3
"""
import argparse
import json

from rockssl.model import ArchConfig
from rockssl.sampler import MaskSpec, build_ssl_dataset
from rockssl.training import SearchSpace, TrainConfig, random_search
from rockssl.voxel import SynthSpec, generate_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--budget", type=int, default=8)
    ap.add_argument("--cv", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--dims", type=int, default=32)
    ap.add_argument("--per-volume", type=int, default=600)
    ap.add_argument("--max-feature-maps", type=int, default=16,
                    help="cap on conv feature maps to keep trials short")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="trials.json")
    args = ap.parse_args()

    vol, _ = generate_synthetic(SynthSpec((args.dims,) * 3, 2.0, 0.25, seed=args.seed))
    data, _ = build_ssl_dataset([vol], args.per_volume, MaskSpec(), split=1.0, seed=args.seed)
    space = SearchSpace(feature_maps=(2, args.max_feature_maps))
    trials = random_search(space, args.budget, data, ArchConfig(), TrainConfig(epochs=args.epochs),
                           seed=args.seed, cv=args.cv, workers=args.workers)
    for t in trials:
        arch, train = t["config"]["arch"], t["config"]["train"]
        score = "diverged" if t["mean_rmse"] is None else f"{t['mean_rmse']:.4f}"
        print(f"trial {t['trial']:2d}  rmse {score:>8}  lr {train['lr']:g}  batch {train['batch_size']:3d}"
              f"  maps {arch['feature_maps']}  attn {arch['attn_layers']}  fc {arch['fc_widths']}"
              f"  {arch['activation']}")
    with open(args.out, "w") as fh:
        json.dump(trials, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
