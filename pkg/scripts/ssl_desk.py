"""Masked-restoration pretraining on one synthetic volume.

Prints per-epoch masked RMSE and the ratio to the constant-mean baseline.

    python3 scripts/ssl_desk.py --dims 64 --per-volume 8000 --epochs 10
"""
import argparse
import json
import time

from rockssl.model import ArchConfig, build_model
from rockssl.sampler import MaskSpec, build_ssl_dataset
from rockssl.training import TrainConfig, pretrain
from rockssl.voxel import SynthSpec, generate_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, default=64)
    ap.add_argument("--porosity", type=float, default=0.25)
    ap.add_argument("--corr-len", type=float, default=2.0)
    ap.add_argument("--per-volume", type=int, default=8000)
    ap.add_argument("--mask-mode", choices=["voxel", "patch"], default="voxel")
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="write metrics as JSON lines here")
    args = ap.parse_args()

    vol, labels = generate_synthetic(SynthSpec((args.dims,) * 3, args.corr_len, args.porosity, seed=1))
    train, test = build_ssl_dataset([vol], args.per_volume, MaskSpec(mode=args.mask_mode, seed=args.seed),
                                    0.5, seed=args.seed)
    baseline = float(test.targets[test.masks].std())
    print(f"volume porosity {labels.porosity:.4f}, {len(train)} train / {len(test)} test sub-cubes")
    print(f"constant-mean baseline (masked-target std): {baseline:.4f}")

    start = time.perf_counter()
    _, metrics = pretrain(build_model(ArchConfig(), args.seed), train, test,
                          TrainConfig(epochs=args.epochs, seed=args.seed))
    for train_rec, test_rec in zip(metrics.for_split("train"), metrics.for_split("test")):
        print(f"epoch {train_rec['epoch']:3d}  train {train_rec['rmse']:.4f}  test {test_rec['rmse']:.4f}"
              f"  test r2 {test_rec['r2']:.3f}")
    ratio = metrics.summary["test_rmse"] / baseline
    print(f"held-out rmse / baseline = {ratio:.3f}  ({time.perf_counter() - start:.0f}s)")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(metrics.to_jsonl())
            fh.write(json.dumps({"type": "baseline", "rmse": baseline, "ratio": ratio}) + "\n")


if __name__ == "__main__":
    main()
