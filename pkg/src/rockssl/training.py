"""Training loops, metrics, cross-validation, and hyperparameter search."""
from __future__ import annotations

import itertools
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    ConfigMismatch,
    EmptyBudget,
    EmptyMask,
    InvalidK,
    LengthMismatch,
    MissingLabels,
    NegativeLearningRate,
    NonFiniteLoss,
    NonFiniteValue,
    TooFewSamples,
    WrongHead,
    ZeroVariance,
)
from .model import (
    TARGET_NAMES,
    ArchConfig,
    Model,
    build_model,
    coarsen,
    coarsen_mask,
    forward,
    leaf_tensors,
    transfer_weights,
)
from .optim import make_optimizer
from .sampler import SSLDataset, SupervisedDataset, derive_rng

EVAL_BATCH = 512
TAG_EPOCH, TAG_FOLD, TAG_TRIAL = 11, 12, 13


# metrics

def rmse(pred, target, mask=None) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise LengthMismatch(f"{pred.size} predictions vs {target.size} targets")
    if mask is not None:
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask.ravel()) if mask.dtype == bool else mask.ravel()
        if idx.size == 0:
            raise EmptyMask("mask selects no entries")
        pred, target = pred[idx], target[idx]
    if pred.size == 0:
        raise LengthMismatch("rmse of empty vectors")
    d = pred - target
    return float(np.sqrt(np.mean(d * d)))


def r_squared(pred, target) -> float:
    """1 - SS_res / SS_tot, with SS_tot about the target mean."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise LengthMismatch(f"{pred.size} predictions vs {target.size} targets")
    if target.size < 2:
        raise LengthMismatch("r_squared needs at least two values")
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    if ss_tot == 0.0:
        raise ZeroVariance("targets have zero variance")
    ss_res = float(np.sum((pred - target) ** 2))
    return 1.0 - ss_res / ss_tot


def _r2_or_none(pred, target):
    try:
        return r_squared(pred, target)
    except (ZeroVariance, LengthMismatch):
        return None


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 30
    optimizer: str = "adam"
    seed: int = 0
    loss_scope: str = "masked_only"  # SSL only: "masked_only" or "all"
    eval_every: int = 1

    @classmethod
    def finetune_defaults(cls, **kw) -> "TrainConfig":
        return cls(**{"lr": 1e-5, **kw})

    def validate(self) -> None:
        if not self.lr > 0:
            raise NegativeLearningRate(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss_scope not in ("masked_only", "all"):
            raise ValueError(f"unknown loss_scope {self.loss_scope!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Metrics:
    """Per-epoch records plus a final summary.

    ``wall_time`` is kept on the records in memory but left out of
    :meth:`to_jsonl` unless asked for, so logs from identical runs are
    byte-identical.
    """

    records: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def for_split(self, split: str) -> list[dict]:
        return [r for r in self.records if r["split"] == split]

    def to_jsonl(self, with_time: bool = False) -> str:
        lines = []
        for rec in self.records:
            rec = dict(rec)
            if not with_time:
                rec.pop("wall_time", None)
            lines.append(json.dumps({"type": "epoch", **rec}, sort_keys=True))
        lines.append(json.dumps({"type": "summary", **self.summary}, sort_keys=True))
        return "\n".join(lines) + "\n"


# SSL pretraining

def _ssl_arrays(model: Model, data: SSLDataset, scope: str):
    """Targets and loss weights in the model's output space."""
    targets, masks = data.targets, data.masks
    if model.config.ssl_output == "coarse":
        targets = coarsen(targets, data.edge)
        masks = coarsen_mask(masks, data.edge)
    weights = masks if scope == "masked_only" else np.ones_like(masks)
    return targets, masks, weights.astype(np.float32)


def _predict(model: Model, x: np.ndarray) -> np.ndarray:
    p = leaf_tensors(model.params)
    outs = [forward(model.config, p, Tensor(x[i:i + EVAL_BATCH])).data
            for i in range(0, len(x), EVAL_BATCH)]
    return np.concatenate(outs)


def evaluate_ssl(model: Model, data: SSLDataset) -> dict:
    """RMSE and R^2 pooled over masked target voxels (blocks for coarse output)."""
    targets, masks, _ = _ssl_arrays(model, data, "masked_only")
    pred = _predict(model, data.inputs)
    sel = masks.ravel()
    return {"rmse": rmse(pred.ravel()[sel], targets.ravel()[sel]),
            "r2": _r2_or_none(pred.ravel()[sel], targets.ravel()[sel])}


def _train_epochs(model: Model, n: int, config: TrainConfig, step_loss, evaluate, splits) -> Metrics:
    """Shared minibatch loop: ``step_loss(params, idx)`` returns a scalar loss tensor."""
    opt_state, step = make_optimizer(config.optimizer, config.lr)
    metrics = Metrics()
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is detected explicitly
        _epoch_loop(model, n, config, step_loss, evaluate, splits, opt_state, step, metrics)
    return metrics


def _epoch_loop(model, n, config, step_loss, evaluate, splits, opt_state, step, metrics):
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = derive_rng(config.seed, TAG_EPOCH, epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            p = leaf_tensors(model.params, requires_grad=True)
            loss = step_loss(p, idx)
            try:
                grads = ad.backward(loss, p)
            except NonFiniteValue:
                raise NonFiniteLoss(epoch, metrics) from None
            step(model.params, grads, opt_state)
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            elapsed = time.perf_counter() - t0
            for split, data in splits:
                rec = evaluate(model, data)
                if not all(v is None or math.isfinite(v) for v in rec.values()):
                    raise NonFiniteLoss(epoch, metrics)
                metrics.records.append({"epoch": epoch, "split": split, **rec, "wall_time": elapsed})


def _summarize(metrics: Metrics, final: dict[str, dict]) -> dict:
    out = {}
    for split, rec in final.items():
        for k, v in rec.items():
            out[f"{split}_{k}"] = v
    return out


def pretrain(model: Model, train: SSLDataset, test: SSLDataset | None = None,
             config: TrainConfig = TrainConfig()) -> tuple[Model, Metrics]:
    """Masked-restoration training with Adam on MSE; returns a trained copy."""
    if model.config.head != "ssl_restore":
        raise WrongHead("pretrain needs an ssl_restore head")
    config.validate()
    model = model.copy()
    targets, _, weights = _ssl_arrays(model, train, config.loss_scope)

    def step_loss(p, idx):
        out = forward(model.config, p, Tensor(train.inputs[idx]))
        w = weights[idx]
        if not w.any():
            w = np.ones_like(w)
        return ad.mse(out, targets[idx], w)

    splits = [("train", train)] + ([("test", test)] if test is not None and len(test) else [])
    metrics = _train_epochs(model, len(train), config, step_loss, evaluate_ssl, splits)
    final = {s: evaluate_ssl(model, d) for s, d in splits}
    metrics.summary = {"task": "ssl", "optimizer": config.optimizer, "lr": config.lr,
                       "epochs": config.epochs, **_summarize(metrics, final)}
    model.provenance = {"task": "ssl", "seed": config.seed, "epochs": config.epochs,
                        "lr": config.lr, "optimizer": config.optimizer,
                        "batch_size": config.batch_size, "loss_scope": config.loss_scope}
    return model, metrics


# supervised fine-tuning

def target_stats(targets: np.ndarray) -> dict:
    mean = targets.mean(axis=0)
    std = targets.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return {"mean": [float(m) for m in mean], "std": [float(s) for s in std]}


def predict_supervised(model: Model, inputs: np.ndarray) -> np.ndarray:
    z = _predict(model, inputs).astype(np.float64)
    return z * np.asarray(model.target_norm["std"]) + np.asarray(model.target_norm["mean"])


def evaluate_supervised(model: Model, data: SupervisedDataset) -> dict:
    """Per-target RMSE/R^2 in original units plus their unweighted means."""
    pred = predict_supervised(model, data.inputs)
    rec = {}
    for j, name in enumerate(TARGET_NAMES):
        rec[f"rmse_{name}"] = rmse(pred[:, j], data.targets[:, j])
        rec[f"r2_{name}"] = _r2_or_none(pred[:, j], data.targets[:, j])
    rec["rmse"] = float(np.mean([rec[f"rmse_{n}"] for n in TARGET_NAMES]))
    r2s = [rec[f"r2_{n}"] for n in TARGET_NAMES]
    rec["r2"] = None if any(r is None for r in r2s) else float(np.mean(r2s))
    return rec


def init_supervised(init, arch: ArchConfig | None, seed: int) -> Model:
    """``init`` is "random" (needs ``arch``) or a pretrained SSL :class:`Model`."""
    if isinstance(init, Model):
        return transfer_weights(init, head_seed=seed)
    if init != "random":
        raise ValueError(f"init must be 'random' or a Model, got {init!r}")
    if arch is None:
        raise ConfigMismatch("random init needs an ArchConfig")
    model = build_model(replace(arch, head="regress2"), seed)
    model.provenance = {"init": "random", "seed": int(seed)}
    return model


def finetune(train: SupervisedDataset, test: SupervisedDataset | None = None,
             config: TrainConfig = TrainConfig.finetune_defaults(), init="random",
             arch: ArchConfig | None = None) -> tuple[Model, Metrics]:
    """Regress standardized (porosity, permeability) from unmasked sub-cubes."""
    if train.targets is None or not np.all(np.isfinite(train.targets)):
        raise MissingLabels("training targets missing or non-finite")
    config.validate()
    model = init_supervised(init, arch, config.seed)
    model.target_norm = target_stats(train.targets)
    mean, std = np.asarray(model.target_norm["mean"]), np.asarray(model.target_norm["std"])
    z = ((train.targets - mean) / std).astype(np.float32)

    def step_loss(p, idx):
        return ad.mse(forward(model.config, p, Tensor(train.inputs[idx])), z[idx])

    splits = [("train", train)] + ([("test", test)] if test is not None and len(test) else [])
    metrics = _train_epochs(model, len(train), config, step_loss, evaluate_supervised, splits)
    final = {s: evaluate_supervised(model, d) for s, d in splits}
    init_name = "pretrained" if isinstance(init, Model) else "random"
    metrics.summary = {"task": "supervised", "init": init_name, "optimizer": config.optimizer,
                       "lr": config.lr, "epochs": config.epochs, **_summarize(metrics, final)}
    model.provenance = {**model.provenance, "task": "supervised", "init": init_name,
                        "seed": config.seed, "epochs": config.epochs, "lr": config.lr,
                        "optimizer": config.optimizer, "batch_size": config.batch_size}
    return model, metrics


def compare_initializations(train: SupervisedDataset, test: SupervisedDataset, pretrained: Model,
                            config: TrainConfig) -> list[dict]:
    """Random-init vs pretrained-init fine-tuning with identical settings, one row each."""
    rows = []
    for label, init in (("random", "random"), ("pretrained", pretrained)):
        _, m = finetune(train, test, config, init=init, arch=pretrained.config)
        s = m.summary
        rows.append({"initialization": label,
                     "train_rmse": s.get("train_rmse"), "test_rmse": s.get("test_rmse"),
                     "train_r2": s.get("train_r2"), "test_r2": s.get("test_r2"),
                     **{k: v for k, v in s.items() if k.startswith(("train_r", "test_r"))}})
    return rows


# cross-validation

def kfold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded partition of ``range(n)`` into ``k`` folds whose sizes differ by at most one."""
    if k < 2:
        raise InvalidK(f"k must be >= 2, got {k}")
    if n < k:
        raise TooFewSamples(f"{n} samples cannot fill {k} folds")
    perm = derive_rng(seed, TAG_FOLD).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def _fit(task: str, arch: ArchConfig, train, val, config: TrainConfig) -> Metrics:
    if task == "ssl":
        _, m = pretrain(build_model(replace(arch, head="ssl_restore"), config.seed), train, val, config)
    else:
        _, m = finetune(train, val, config, init="random", arch=arch)
    return m


def cross_validate(dataset, arch: ArchConfig, config: TrainConfig, k: int = 5,
                   workers: int = 1) -> dict:
    """k-fold CV; each fold is the validation split exactly once.

    Returns ``{"folds": [fold summaries], "mean_rmse", "std_rmse", "mean_r2", "std_r2"}``
    computed from validation ("test") metrics.
    """
    task = "ssl" if isinstance(dataset, SSLDataset) else "supervised"
    folds = kfold_indices(len(dataset), k, config.seed)

    def run(i):
        val = folds[i]
        tr = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
        m = _fit(task, arch, dataset.subset(tr), dataset.subset(val), config)
        return {"fold": i, "n_val": int(len(val)), **m.summary}

    results = _map(run, range(k), workers)
    return {"folds": results, **_aggregate([r.get("test_rmse") for r in results],
                                           [r.get("test_r2") for r in results])}


def holdout(dataset, arch: ArchConfig, config: TrainConfig, fraction: float = 0.2) -> dict:
    """Single seeded train/validation split; same result shape as :func:`cross_validate`."""
    task = "ssl" if isinstance(dataset, SSLDataset) else "supervised"
    perm = derive_rng(config.seed, TAG_FOLD).permutation(len(dataset))
    n_val = max(1, int(round(fraction * len(dataset))))
    val, tr = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    m = _fit(task, arch, dataset.subset(tr), dataset.subset(val), config)
    r = {"fold": 0, "n_val": int(n_val), **m.summary}
    return {"folds": [r], **_aggregate([r.get("test_rmse")], [r.get("test_r2")])}


def _aggregate(rmses, r2s) -> dict:
    def stats(vals):
        vals = [v for v in vals if v is not None]
        if not vals:
            return None, None
        return float(np.mean(vals)), float(np.std(vals))

    mr, sr = stats(rmses)
    m2, s2 = stats(r2s)
    return {"mean_rmse": mr, "std_rmse": sr, "mean_r2": m2, "std_r2": s2}


def _map(fn, items, workers: int):
    items = list(items)
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))  # map keeps input order


# random search

@dataclass(frozen=True)
class SearchSpace:
    lrs: tuple[float, ...] = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
    batch_sizes: tuple[int, ...] = (16, 32, 64, 128, 256, 512)
    conv_layers: tuple[int, int] = (1, 5)
    attn_layers: tuple[int, int] = (1, 5)
    fc_layers: tuple[int, int] = (1, 5)  # including the head
    feature_maps: tuple[int, int] = (2, 64)
    fc_widths: tuple[int, ...] = (16, 32, 64, 128)
    activations: tuple[str, ...] = ("relu", "sigmoid", "tanh")

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(**{k: tuple(v) for k, v in d.items() if k in cls.__dataclass_fields__})

    def sample(self, rng: np.random.Generator, base_arch: ArchConfig, base_train: TrainConfig
               ) -> tuple[ArchConfig, TrainConfig]:
        n_conv = int(rng.integers(self.conv_layers[0], self.conv_layers[1] + 1))
        n_attn = int(rng.integers(self.attn_layers[0], self.attn_layers[1] + 1))
        n_fc = int(rng.integers(self.fc_layers[0], self.fc_layers[1] + 1))
        maps = tuple(int(m) for m in rng.integers(self.feature_maps[0], self.feature_maps[1] + 1,
                                                  size=n_conv))
        widths = tuple(int(self.fc_widths[i]) for i in rng.integers(len(self.fc_widths), size=n_fc - 1))
        act = str(self.activations[rng.integers(len(self.activations))])
        lr = float(self.lrs[rng.integers(len(self.lrs))])
        batch = int(self.batch_sizes[rng.integers(len(self.batch_sizes))])
        arch = replace(base_arch, feature_maps=maps, attn_layers=n_attn, fc_widths=widths,
                       activation=act)
        return arch, replace(base_train, lr=lr, batch_size=batch)

    def grid(self, base_arch: ArchConfig, base_train: TrainConfig):
        """Exhaustive product over lr, batch, activation and layer counts.

        Feature maps and fc widths are held at the base config's first value.
        """
        fm = base_arch.feature_maps[0]
        fw = base_arch.fc_widths[0] if base_arch.fc_widths else self.fc_widths[0]
        for lr, batch, act, nc, na, nf in itertools.product(
                self.lrs, self.batch_sizes, self.activations,
                range(self.conv_layers[0], self.conv_layers[1] + 1),
                range(self.attn_layers[0], self.attn_layers[1] + 1),
                range(self.fc_layers[0], self.fc_layers[1] + 1)):
            arch = replace(base_arch, feature_maps=(fm,) * nc, attn_layers=na,
                           fc_widths=(fw,) * (nf - 1), activation=act)
            yield arch, replace(base_train, lr=lr, batch_size=batch)


def random_search(space: SearchSpace, budget: int, dataset, base_arch: ArchConfig = ArchConfig(),
                  base_train: TrainConfig = TrainConfig(), seed: int = 0, cv: int | None = 5,
                  exhaustive: bool = False, workers: int = 1, dry_run: bool = False) -> list[dict]:
    """Sample ``budget`` configurations and rank them by mean validation RMSE.

    ``cv=None`` (or 1) swaps k-fold CV for a single 80/20 holdout. Diverged
    trials keep their record with ``status="diverged"`` and sort last.
    ``dry_run`` samples and logs configurations without training.
    """
    if budget < 1:
        raise EmptyBudget("budget must be >= 1")
    if exhaustive:
        draws = list(itertools.islice(space.grid(base_arch, base_train), budget))
    else:
        rng = derive_rng(seed, TAG_TRIAL)
        draws = [space.sample(rng, base_arch, base_train) for _ in range(budget)]

    def run(i):
        arch, tc = draws[i]
        tc = replace(tc, seed=int(derive_rng(seed, TAG_TRIAL, i).integers(2**31)))
        rec = {"trial": i, "config": {"arch": arch.to_dict(), "train": tc.to_dict()},
               "n_layers": arch.n_layers}
        if dry_run:
            return {**rec, "status": "sampled", "fold_metrics": [], "mean_rmse": None}
        try:
            res = (cross_validate(dataset, arch, tc, cv) if cv and cv > 1
                   else holdout(dataset, arch, tc))
            return {**rec, "status": "ok", "fold_metrics": res["folds"],
                    "mean_rmse": res["mean_rmse"], "mean_r2": res["mean_r2"]}
        except NonFiniteLoss as exc:
            return {**rec, "status": "diverged", "diverged_epoch": exc.epoch,
                    "fold_metrics": [], "mean_rmse": None}

    trials = _map(run, range(len(draws)), workers)
    return sorted(trials, key=lambda t: (t["mean_rmse"] is None,
                                         t["mean_rmse"] if t["mean_rmse"] is not None else 0.0,
                                         t["trial"]))
