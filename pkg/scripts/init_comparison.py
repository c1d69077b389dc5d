"""Random vs pretrained initialization for porosity/permeability regression.

Eight synthetic cores; the first six train and the last two are held out.
The trunk is pretrained by masked restoration on all eight cores, then both
initializations are fine-tuned with identical settings.

    python3 scripts/init_comparison.py --epochs 30
"""
import argparse
import json

import numpy as np

from rockssl.model import ArchConfig, build_model
from rockssl.sampler import MaskSpec, build_ssl_dataset, build_supervised_dataset
from rockssl.training import TrainConfig, compare_initializations, pretrain
from rockssl.voxel import SynthSpec, generate_synthetic

# held-out cores land inside the training porosity range
CORE_ORDER = [0, 1, 3, 4, 6, 7, 2, 5]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, default=48)
    ap.add_argument("--corr-len", type=float, default=0.5)
    ap.add_argument("--per-core", type=int, default=500)
    ap.add_argument("--pretrain-epochs", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--lr", type=float, default=1e-5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="write the two rows as JSON here")
    args = ap.parse_args()

    phis = np.linspace(0.15, 0.35, 8)
    cores = [generate_synthetic(SynthSpec((args.dims,) * 3, args.corr_len, float(phis[i]), seed=100 + i))
             for i in CORE_ORDER]
    for i, (_, lab) in enumerate(cores):
        role = "train" if i < 6 else "test"
        print(f"core {i} ({role}): porosity {lab.porosity:.3f}, permeability {lab.permeability:.1f} mD")

    ssl_train, ssl_test = build_ssl_dataset([v for v, _ in cores], args.per_core, MaskSpec(), 0.5, seed=args.seed)
    pretrained, ssl_metrics = pretrain(build_model(ArchConfig(), args.seed), ssl_train, ssl_test,
                                       TrainConfig(epochs=args.pretrain_epochs, seed=args.seed))
    print(f"pretraining: test masked rmse {ssl_metrics.summary['test_rmse']:.4f}")

    train, test = build_supervised_dataset(cores, args.per_core, "first:6", seed=args.seed)
    rows = compare_initializations(train, test, pretrained, TrainConfig(lr=args.lr, epochs=args.epochs,
                                                                        seed=args.seed))
    cols = ["train_rmse", "test_rmse", "train_r2", "test_r2", "test_r2_porosity", "test_r2_permeability"]
    print(f"{'init':<12}" + "".join(f"{c:>22}" for c in cols))
    for r in rows:
        print(f"{r['initialization']:<12}" + "".join(f"{r[c]:>22.4f}" for c in cols))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
