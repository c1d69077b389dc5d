"""CNN -> attention -> MLP model for 10x10x10 sub-cubes.

Layout of one forward pass (edge ``E``, default 10):

* the flat cube is viewed as ``E`` channels (z-slices) of ``E x E`` images;
* a stack of same-padded 2-D convolutions mixes all slices under each
  ``k x k`` footprint (the first layer is the "3x3x10" convolution);
* each of the last layer's ``F`` feature maps becomes one token of
  dimension ``E**2`` (plus a learned positional embedding);
* post-norm residual multi-head self-attention blocks;
* flatten, fully connected layers, and a task head: ``E**3`` sigmoid units
  that restore the cube (``ssl_restore``) or two linear outputs that predict
  standardized (porosity, permeability) (``regress2``).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigMismatch, InvalidConfig, MissingNormStats, WrongHead

HEADS = ("ssl_restore", "regress2")
SSL_OUTPUTS = ("full", "coarse")
TARGET_NAMES = ("porosity", "permeability")


@dataclass(frozen=True)
class ArchConfig:
    edge: int = 10
    feature_maps: tuple[int, ...] = (10, 10)  # one entry per conv layer
    kernel: int = 3
    attn_layers: int = 1
    heads: int = 10
    fc_widths: tuple[int, ...] = (64,)  # hidden fc layers; the head is one more fc layer
    activation: str = "relu"
    use_layernorm: bool = True
    residual: bool = True
    use_positional_embedding: bool = True
    head: str = "ssl_restore"
    # "coarse" restores a 2x2x2 block-averaged cube, (E/2)**3 units (125 at E=10)
    ssl_output: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "feature_maps", tuple(int(f) for f in self.feature_maps))
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))

    @property
    def conv_layers(self) -> int:
        return len(self.feature_maps)

    @property
    def fc_layers(self) -> int:
        return len(self.fc_widths) + 1

    @property
    def n_layers(self) -> int:
        return self.conv_layers + self.attn_layers + self.fc_layers

    @property
    def token_dim(self) -> int:
        return self.edge * self.edge

    @property
    def n_tokens(self) -> int:
        return self.feature_maps[-1]

    @property
    def ssl_units(self) -> int:
        return self.edge**3 if self.ssl_output == "full" else (self.edge // 2) ** 3

    def validate(self) -> None:
        if self.edge < 1:
            raise InvalidConfig("edge must be positive")
        if not self.feature_maps or any(f < 1 for f in self.feature_maps):
            raise InvalidConfig("need at least one conv layer with >= 1 feature map")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidConfig(f"kernel extent must be odd, got {self.kernel}")
        if self.attn_layers < 0:
            raise InvalidConfig("attn_layers must be >= 0")
        if self.heads < 1 or self.token_dim % self.heads:
            raise InvalidConfig(f"token dimension {self.token_dim} not divisible by {self.heads} heads")
        if any(w < 1 for w in self.fc_widths):
            raise InvalidConfig("fc widths must be positive")
        if self.activation not in ("relu", "sigmoid", "tanh"):
            raise InvalidConfig(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise InvalidConfig(f"unknown head {self.head!r}")
        if self.ssl_output not in SSL_OUTPUTS:
            raise InvalidConfig(f"unknown ssl_output {self.ssl_output!r}")
        if self.ssl_output == "coarse" and self.edge % 2:
            raise InvalidConfig("coarse restoration needs an even edge")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_maps"] = list(self.feature_maps)
        d["fc_widths"] = list(self.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def trunk_key(self) -> dict:
        """The part of the config that fixes trunk tensor shapes."""
        d = self.to_dict()
        d.pop("head")
        d.pop("ssl_output")
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class Model:
    config: ArchConfig
    params: dict[str, np.ndarray]
    target_norm: dict | None = None  # {"mean": [..2], "std": [..2]} for regress2
    provenance: dict = field(default_factory=dict)

    def trunk_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("head.")]

    def n_params(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()},
                     None if self.target_norm is None else json.loads(json.dumps(self.target_norm)),
                     dict(self.provenance))


# parameter construction

def param_shapes(config: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map. Pure function of the config."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = config.edge
    for i, f in enumerate(config.feature_maps):
        shapes[f"conv.{i}.weight"] = (f, c_in, config.kernel, config.kernel)
        shapes[f"conv.{i}.bias"] = (f,)
        c_in = f
    d, t = config.token_dim, config.n_tokens
    if config.use_positional_embedding:
        shapes["pos_embedding"] = (t, d)
    for i in range(config.attn_layers):
        for proj in "qkvo":
            shapes[f"attn.{i}.{proj}.weight"] = (d, d)
            if proj != "k":  # a key bias cannot change softmax output
                shapes[f"attn.{i}.{proj}.bias"] = (d,)
        if config.use_layernorm:
            shapes[f"attn.{i}.norm.gain"] = (d,)
            shapes[f"attn.{i}.norm.bias"] = (d,)
    n_in = t * d
    for i, w in enumerate(config.fc_widths):
        shapes[f"fc.{i}.weight"] = (w, n_in)
        shapes[f"fc.{i}.bias"] = (w,)
        n_in = w
    n_out = config.ssl_units if config.head == "ssl_restore" else 2
    shapes["head.weight"] = (n_out, n_in)
    shapes["head.bias"] = (n_out,)
    return shapes


def _init_tensor(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith("norm.gain"):
        return np.ones(shape, dtype=np.float32)
    if name.endswith(".bias"):
        return np.zeros(shape, dtype=np.float32)
    if name == "pos_embedding":
        return rng.uniform(-0.1, 0.1, size=shape).astype(np.float32)
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _init_params(config: ArchConfig, rng: np.random.Generator, names=None) -> dict[str, np.ndarray]:
    shapes = param_shapes(config)
    out = {}
    for name, shape in shapes.items():
        # draw every tensor so the stream position doesn't depend on `names`
        arr = _init_tensor(name, shape, rng)
        if names is None or name in names:
            out[name] = arr
    return out


def build_model(config: ArchConfig = ArchConfig(), seed: int = 0) -> Model:
    """Fresh model: fan-in-scaled uniform weights, zero biases."""
    config.validate()
    return Model(config, _init_params(config, np.random.default_rng(seed)))


def count_parameters(config: ArchConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


# forward pass on autodiff tensors

def leaf_tensors(params: dict[str, np.ndarray], requires_grad: bool = False,
                 dtype=None) -> dict[str, Tensor]:
    return {k: Tensor(v if dtype is None else v.astype(dtype), requires_grad=requires_grad)
            for k, v in params.items()}


def conv_stack(config: ArchConfig, p: dict[str, Tensor], x: Tensor, act=None) -> Tensor:
    """(B, E**3) cube batch -> (B, F, E, E) feature maps."""
    e = config.edge
    h = ad.reshape(x, (x.shape[0], e, e, e))
    act = act or ad.ACTIVATIONS[config.activation]
    for i in range(config.conv_layers):
        h = act(ad.conv2d(h, p[f"conv.{i}.weight"], p[f"conv.{i}.bias"]))
    return h


def tokenize(config: ArchConfig, p: dict[str, Tensor], maps: Tensor) -> Tensor:
    """Feature maps -> (B, F, E**2) tokens, with positional embedding if enabled."""
    tokens = ad.reshape(maps, (maps.shape[0], config.n_tokens, config.token_dim))
    if config.use_positional_embedding:
        tokens = ad.add(tokens, p["pos_embedding"])
    return tokens


def attention_stack(config: ArchConfig, p: dict[str, Tensor], tokens: Tensor) -> Tensor:
    h = tokens
    for i in range(config.attn_layers):
        sub = {k[len(f"attn.{i}."):]: v for k, v in p.items() if k.startswith(f"attn.{i}.")}
        a = ad.multi_head_attention(h, sub, config.heads)
        h = ad.add(h, a) if config.residual else a
        if config.use_layernorm:
            h = ad.layer_norm(h, sub["norm.gain"], sub["norm.bias"])
    return h


def trunk(config: ArchConfig, p: dict[str, Tensor], x: Tensor, act=None) -> Tensor:
    """Everything up to the head: returns the last hidden (B, width) activations.

    ``act`` overrides the configured hidden activation (used by gradient checks).
    """
    act = act or ad.ACTIVATIONS[config.activation]
    h = attention_stack(config, p, tokenize(config, p, conv_stack(config, p, x, act)))
    h = ad.reshape(h, (h.shape[0], config.n_tokens * config.token_dim))
    for i in range(len(config.fc_widths)):
        h = act(ad.linear(h, p[f"fc.{i}.weight"], p[f"fc.{i}.bias"]))
    return h


def head(config: ArchConfig, p: dict[str, Tensor], features: Tensor) -> Tensor:
    out = ad.linear(features, p["head.weight"], p["head.bias"])
    return ad.sigmoid(out) if config.head == "ssl_restore" else out


def forward(config: ArchConfig, p: dict[str, Tensor], x: Tensor, act=None) -> Tensor:
    """Raw network output: sigmoid restoration, or standardized regression."""
    return head(config, p, trunk(config, p, x, act))


def coarsen(values: np.ndarray, edge: int) -> np.ndarray:
    """(..., E**3) -> (..., (E/2)**3) by 2x2x2 block means."""
    lead = values.shape[:-1]
    h = edge // 2
    blocks = values.reshape(*lead, h, 2, h, 2, h, 2)
    return blocks.mean(axis=(-5, -3, -1)).reshape(*lead, h**3)


def coarsen_mask(mask: np.ndarray, edge: int) -> np.ndarray:
    """A block counts as masked if any of its voxels is."""
    return coarsen(mask.astype(np.float32), edge) > 0


# numpy-level entry points

def _batch(x, edge: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 1 or x.shape == (edge, edge, edge)
    x = x.reshape(1 if single else x.shape[0], edge**3)
    return x, single


def _run(model: Model, x: np.ndarray, fn, batch_size: int = 512) -> np.ndarray:
    p = leaf_tensors(model.params)
    outs = [fn(model.config, p, Tensor(x[i:i + batch_size])).data
            for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0,), dtype=np.float32)


def forward_ssl(model: Model, masked_input) -> np.ndarray:
    """Restored cube(s) with values in (0, 1); same shape as the input for full output."""
    if model.config.head != "ssl_restore":
        raise WrongHead("forward_ssl needs an ssl_restore head")
    shape = np.shape(masked_input)
    x, single = _batch(masked_input, model.config.edge)
    out = _run(model, x, forward)
    if model.config.ssl_output == "full":
        return out.reshape(shape)
    return out[0] if single else out


def forward_supervised(model: Model, inputs) -> np.ndarray:
    """(porosity, permeability) in original units; (2,) for one cube, (N, 2) for a batch."""
    if model.config.head != "regress2":
        raise WrongHead("forward_supervised needs a regress2 head")
    if model.target_norm is None:
        raise MissingNormStats("model has no target normalization statistics")
    x, single = _batch(inputs, model.config.edge)
    z = _run(model, x, forward).astype(np.float64)
    y = z * np.asarray(model.target_norm["std"]) + np.asarray(model.target_norm["mean"])
    return y[0] if single else y


def trunk_activations(model: Model, inputs) -> np.ndarray:
    """Probe: last hidden layer before the head."""
    x, _ = _batch(inputs, model.config.edge)
    return _run(model, x, trunk)


def attention_probe(model: Model, tokens) -> np.ndarray:
    """Run only the attention stack on (B, F, E**2) tokens (positional embedding not added)."""
    return attention_stack(model.config, leaf_tensors(model.params),
                           Tensor(np.asarray(tokens, dtype=np.float32))).data


# head replacement

def transfer_weights(pretrained: Model, head_seed: int = 0) -> Model:
    """Copy the trunk of an SSL model under a freshly initialized 2-output head."""
    if pretrained.config.head != "ssl_restore":
        raise ConfigMismatch("transfer needs a checkpoint with an ssl_restore head")
    config = replace(pretrained.config, head="regress2")
    config.validate()
    expected = param_shapes(config)
    for name in pretrained.trunk_names():
        if name not in expected or pretrained.params[name].shape != expected[name]:
            raise ConfigMismatch(f"trunk tensor {name} does not fit the config")
    params = {n: pretrained.params[n].copy() for n in pretrained.trunk_names()}
    rng = np.random.default_rng(head_seed)
    params["head.weight"] = _init_tensor("head.weight", expected["head.weight"], rng)
    params["head.bias"] = _init_tensor("head.bias", expected["head.bias"], rng)
    params = {n: params[n] for n in expected}  # canonical order
    prov = {"transferred_from": dict(pretrained.provenance), "head_seed": int(head_seed)}
    return Model(config, params, None, prov)


# gradient check of the whole model

def model_grad_check(config: ArchConfig = ArchConfig(), seed: int = 0, n_inputs: int = 10,
                     fd_epsilon: float = 1e-5, coords_per_tensor: int = 200,
                     report: dict | None = None, attn_sharpness: float = 4.0,
                     target_offset: float = 0.01, relu_margin: float = 1e-3) -> float:
    """Max relative error of the full model's loss gradient in float64.

    Uses a batch of ``n_inputs`` random cubes and MSE against targets a small
    random offset (``target_offset``) away from the starting prediction; for
    ``ssl_restore`` the loss covers a random 20% of outputs. Central
    differences can't resolve changes below one ulp of the loss, so a loss
    near zero keeps that floor well under the gradients being checked.
    ReLU pre-activations are held at least ``relu_margin`` from the kink.
    """
    from .gradcheck import KinkGuard, grad_check

    config.validate()
    model = build_model(config, seed)
    rng = np.random.default_rng([seed, 99])
    params = {k: v.astype(np.float64) for k, v in model.params.items()}
    # move biases off zero so every path carries gradient, and sharpen the
    # attention so q/k gradients are not vanishingly small
    for k in params:
        if k.endswith(".bias"):
            params[k] = params[k] + rng.uniform(-0.1, 0.1, size=params[k].shape)
        elif k.endswith((".q.weight", ".k.weight")):
            params[k] = params[k] * attn_sharpness
    x = rng.random((n_inputs, config.edge**3))
    act = KinkGuard(relu_margin) if config.activation == "relu" else None

    def run(p):
        if act is not None:
            act.reset()
        return forward(config, p, Tensor(x), act)

    start = run(leaf_tensors(params)).data
    target = start + target_offset * rng.standard_normal(start.shape)
    weight = None
    if config.head == "ssl_restore":
        weight = (rng.random(start.shape) < 0.2).astype(np.float64)
        weight[:, 0] = 1.0

    def loss(p):
        return ad.mse(run(p), target, weight)

    return grad_check(loss, params, fd_epsilon, coords_per_tensor, seed=seed, report=report)
