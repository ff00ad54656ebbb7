"""Layers, losses and the desk-scale model zoo (softplus everywhere)."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Var


class ModelSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    kind: str = "conv2d"


@dataclass(frozen=True)
class Linear:
    out_features: int
    kind: str = "linear"


@dataclass(frozen=True)
class Pool:
    mode: str = "avg"  # "avg" or "max"
    window: int = 2
    kind: str = "pool"


@dataclass(frozen=True)
class Softplus:
    beta: float = 1.0
    kind: str = "softplus"


@dataclass(frozen=True)
class Flatten:
    kind: str = "flatten"


@dataclass(frozen=True)
class Residual:
    """conv-softplus-conv plus a (1x1 conv when channels change) shortcut, then softplus."""

    out_channels: int
    beta: float = 1.0
    kind: str = "residual"


Layer = Union[Conv2d, Linear, Pool, Softplus, Flatten, Residual]
_LAYER_TYPES = {"conv2d": Conv2d, "linear": Linear, "pool": Pool, "softplus": Softplus,
                "flatten": Flatten, "residual": Residual}


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple  # (C, H, W)
    num_classes: int
    name: str = "custom"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [dataclasses.asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            kind = entry.pop("kind")
            layers.append(_LAYER_TYPES[kind](**entry))
        return cls(tuple(layers), tuple(d["input_shape"]), int(d["num_classes"]), d.get("name", "custom"))

    @property
    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ParamSet:
    arrays: dict  # name -> np.ndarray, insertion ordered
    seed: int
    spec_digest: str

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.arrays.items()}, self.seed, self.spec_digest)

    def as_vars(self, requires_grad: bool = True) -> dict:
        return {k: Var(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)


# ---------------------------------------------------------------------------
# shape inference


def _describe(layer) -> str:
    return f"{layer.kind}({', '.join(f'{f.name}={getattr(layer, f.name)}' for f in dataclasses.fields(layer) if f.name != 'kind')})"


def layer_shapes(spec: ModelSpec) -> list[tuple]:
    """Output shape of every layer; raises ModelSpecError on the first incomposable pair."""
    shape = tuple(spec.input_shape)
    if len(shape) != 3:
        raise ModelSpecError(f"input_shape must be (C, H, W), got {shape}")
    shapes = []
    prev = "input"
    for i, layer in enumerate(spec.layers):
        def fail(reason):
            raise ModelSpecError(f"layer {i} {_describe(layer)} cannot follow {prev} with shape {shape}: {reason}")

        if isinstance(layer, (Conv2d, Residual, Pool)):
            if len(shape) != 3:
                fail("expects a (C, H, W) feature map")
            c, h, w = shape
            if isinstance(layer, Conv2d):
                ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                if ho < 1 or wo < 1:
                    fail("kernel larger than padded input")
                shape = (layer.out_channels, ho, wo)
            elif isinstance(layer, Residual):
                shape = (layer.out_channels, h, w)
            else:
                if layer.mode not in ("avg", "max"):
                    fail(f"unknown pooling mode {layer.mode!r}")
                if h // layer.window < 1 or w // layer.window < 1:
                    fail("pooling window larger than input")
                shape = (c, h // layer.window, w // layer.window)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Linear):
            if len(shape) != 1:
                fail("expects flattened features")
            shape = (layer.out_features,)
        elif isinstance(layer, Softplus):
            if layer.beta <= 0:
                fail("softplus beta must be positive")
        else:
            fail("unknown layer type")
        shapes.append(shape)
        prev = _describe(layer)
    if shape != (spec.num_classes,):
        raise ModelSpecError(f"final output shape {shape} does not match num_classes={spec.num_classes}")
    return shapes


def convnet_spec(input_shape=(1, 28, 28), num_classes: int = 10, beta: float = 1.0,
                 pool: str = "avg", channels=(32, 64, 64)) -> ModelSpec:
    """Three 3x3 conv blocks (softplus, 2x2 pooling) and one linear head."""
    layers = []
    for ch in channels:
        layers += [Conv2d(ch, 3, 1, 1), Softplus(beta), Pool(pool, 2)]
    layers += [Flatten(), Linear(num_classes)]
    return ModelSpec(tuple(layers), tuple(input_shape), num_classes, name="convnet")


def small_resnet_spec(input_shape=(3, 32, 32), num_classes: int = 10, beta: float = 1.0,
                      pool: str = "avg", width: int = 16) -> ModelSpec:
    """Stem conv, four residual blocks with pooling between stages, linear head."""
    layers = [Conv2d(width, 3, 1, 1), Softplus(beta)]
    for i, ch in enumerate((width, 2 * width, 4 * width, 4 * width)):
        layers.append(Residual(ch, beta))
        if i < 3:
            layers.append(Pool(pool, 2))
    layers += [Flatten(), Linear(num_classes)]
    return ModelSpec(tuple(layers), tuple(input_shape), num_classes, name="small_resnet")


def linear_spec(input_shape, num_classes: int) -> ModelSpec:
    return ModelSpec((Flatten(), Linear(num_classes)), tuple(input_shape), num_classes, name="linear")


def mlp_spec(input_shape, num_classes: int, hidden: int = 16, beta: float = 1.0) -> ModelSpec:
    return ModelSpec((Flatten(), Linear(hidden), Softplus(beta), Linear(num_classes)),
                     tuple(input_shape), num_classes, name="mlp")


# ---------------------------------------------------------------------------
# parameters


def _param_shapes(spec: ModelSpec) -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) for every trainable array, in layer order."""
    out = []
    shape = tuple(spec.input_shape)
    shapes = layer_shapes(spec)
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv2d):
            c = shape[0]
            fan = c * layer.kernel ** 2
            out.append((f"l{i}.weight", (layer.out_channels, c, layer.kernel, layer.kernel), fan))
            out.append((f"l{i}.bias", (layer.out_channels,), fan))
        elif isinstance(layer, Linear):
            out.append((f"l{i}.weight", (shape[0], layer.out_features), shape[0]))
            out.append((f"l{i}.bias", (layer.out_features,), shape[0]))
        elif isinstance(layer, Residual):
            c, o = shape[0], layer.out_channels
            out.append((f"l{i}.conv1.weight", (o, c, 3, 3), c * 9))
            out.append((f"l{i}.conv1.bias", (o,), c * 9))
            out.append((f"l{i}.conv2.weight", (o, o, 3, 3), o * 9))
            out.append((f"l{i}.conv2.bias", (o,), o * 9))
            if c != o:
                out.append((f"l{i}.shortcut.weight", (o, c, 1, 1), c))
        shape = shapes[i]
    return out


def build_model(spec: ModelSpec, seed: int) -> ParamSet:
    """He-uniform initialisation U(-sqrt(6/fan_in), sqrt(6/fan_in)); zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape, fan_in in _param_shapes(spec):
        if name.endswith("bias"):
            arrays[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ParamSet(arrays, seed, spec.digest)


def check_params(spec: ModelSpec, params: ParamSet) -> None:
    if params.spec_digest != spec.digest:
        raise ModelSpecError(
            f"parameter set was built for spec {params.spec_digest}, not {spec.digest}")
    for name, shape, _ in _param_shapes(spec):
        if name not in params.arrays or params.arrays[name].shape != shape:
            raise ModelSpecError(f"parameter {name} missing or mis-shaped (expected {shape})")


# ---------------------------------------------------------------------------
# forward pass


def _bias4(b: Var) -> Var:
    return ad.reshape(b, (1, b.shape[0], 1, 1))


def _act(x: Var, beta: float, guided: bool) -> Var:
    return ad.guided_softplus(x, beta) if guided else ad.softplus(x, beta)


def model_forward(spec: ModelSpec, params, batch, guided: bool = False,
                  return_features: bool = False):
    """Logits for a [N, C, H, W] batch.

    ``params`` is a ParamSet (treated as constants) or a mapping of Vars.
    ``guided`` swaps every activation for its guided-backprop variant.
    With ``return_features`` the input to the final linear layer is returned too.
    """
    if isinstance(params, ParamSet):
        if params.spec_digest != spec.digest:
            raise ModelSpecError(
                f"parameter set was built for spec {params.spec_digest}, not {spec.digest}")
        p = {k: Var(v) for k, v in params.arrays.items()}
    else:
        p = params
    x = ad.as_var(batch)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ad.ShapeError("model_forward", x.shape, ("N",) + tuple(spec.input_shape))

    features = None
    last_linear = max(i for i, layer in enumerate(spec.layers) if isinstance(layer, Linear))
    for i, layer in enumerate(spec.layers):
        if i == last_linear:
            features = x
        if isinstance(layer, Conv2d):
            x = ad.conv2d(x, p[f"l{i}.weight"], layer.stride, layer.padding)
            x = ad.add(x, _bias4(p[f"l{i}.bias"]))
        elif isinstance(layer, Linear):
            x = ad.add(ad.matmul(x, p[f"l{i}.weight"]), p[f"l{i}.bias"])
        elif isinstance(layer, Softplus):
            x = _act(x, layer.beta, guided)
        elif isinstance(layer, Pool):
            x = ad.avg_pool2d(x, layer.window) if layer.mode == "avg" else ad.max_pool2d(x, layer.window)
        elif isinstance(layer, Flatten):
            x = ad.reshape(x, (x.shape[0], -1))
        elif isinstance(layer, Residual):
            h = ad.add(ad.conv2d(x, p[f"l{i}.conv1.weight"], 1, 1), _bias4(p[f"l{i}.conv1.bias"]))
            h = _act(h, layer.beta, guided)
            h = ad.add(ad.conv2d(h, p[f"l{i}.conv2.weight"], 1, 1), _bias4(p[f"l{i}.conv2.bias"]))
            short = x
            if f"l{i}.shortcut.weight" in p:
                short = ad.conv2d(x, p[f"l{i}.shortcut.weight"], 1, 0)
            x = _act(ad.add(h, short), layer.beta, guided)
    if return_features:
        return x, features
    return x


def predict(spec: ModelSpec, params, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for s in range(0, len(images), batch_size):
            out.append(model_forward(spec, params, images[s : s + batch_size]).value.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def accuracy(spec: ModelSpec, params, images: np.ndarray, labels: np.ndarray) -> float:
    if len(images) == 0:
        return 0.0
    return float(np.mean(predict(spec, params, images) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# losses


def softplus(x, beta: float = 1.0) -> Var:
    return ad.softplus(x, beta)


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy_per_sample(logits, labels) -> Var:
    logits = ad.as_var(logits)
    onehot = one_hot(labels, logits.shape[1])
    if onehot.shape[0] != logits.shape[0]:
        raise ad.ShapeError("cross_entropy", logits.shape, onehot.shape)
    picked = ad.sum_(ad.mul(logits, Var(onehot)), axis=1)
    return ad.sub(ad.logsumexp(logits, axis=1), picked)


def cross_entropy(logits, labels) -> Var:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    return ad.mean(cross_entropy_per_sample(logits, labels))


def kl_divergence_per_sample(p_logits, q_logits) -> Var:
    p_logits, q_logits = ad.as_var(p_logits), ad.as_var(q_logits)
    if p_logits.shape != q_logits.shape:
        raise ad.ShapeError("kl_divergence", p_logits.shape, q_logits.shape)
    log_p = ad.log_softmax(p_logits, axis=1)
    log_q = ad.log_softmax(q_logits, axis=1)
    p = ad.exp(log_p)
    return ad.sum_(ad.mul(p, ad.sub(log_p, log_q)), axis=1)


def kl_divergence(p_logits, q_logits) -> Var:
    """Batch mean of KL(softmax(p) || softmax(q))."""
    return ad.mean(kl_divergence_per_sample(p_logits, q_logits))
