"""Gradient-based saliency maps and the explanation loss between two maps."""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .nn import ModelSpec, model_forward, one_hot

PIXEL_TOLERANCE = 1e-6


class DegenerateSaliencyError(ValueError):
    def __init__(self, indices):
        self.indices = list(indices)
        super().__init__(f"degenerate saliency (all-zero raw map) for images {self.indices}")


class Method(str, enum.Enum):
    GRADIENT = "Gradient"
    GRADIENT_TIMES_INPUT = "GradientTimesInput"
    GUIDED_BACKPROP = "GuidedBackprop"
    INTEGRATED_GRADIENTS = "IntegratedGradients"


_ALIASES = {
    "gradient": Method.GRADIENT,
    "grad": Method.GRADIENT,
    "gradienttimesinput": Method.GRADIENT_TIMES_INPUT,
    "gradient_x_input": Method.GRADIENT_TIMES_INPUT,
    "gradxinput": Method.GRADIENT_TIMES_INPUT,
    "guidedbackprop": Method.GUIDED_BACKPROP,
    "guided_backprop": Method.GUIDED_BACKPROP,
    "integratedgradients": Method.INTEGRATED_GRADIENTS,
    "integrated_gradients": Method.INTEGRATED_GRADIENTS,
}


@dataclass(frozen=True)
class ExplMethod:
    kind: Method = Method.GRADIENT_TIMES_INPUT
    ig_steps: int = 32

    def __post_init__(self):
        if not isinstance(self.kind, Method):
            object.__setattr__(self, "kind", parse_method(self.kind))
        if self.kind is Method.INTEGRATED_GRADIENTS and self.ig_steps < 1:
            raise ValueError("ig_steps must be >= 1 for IntegratedGradients")

    @property
    def name(self) -> str:
        return self.kind.value


def parse_method(name) -> Method:
    if isinstance(name, Method):
        return name
    key = str(name).replace(" ", "").replace("-", "").lower()
    if key in _ALIASES:
        return _ALIASES[key]
    for m in Method:
        if m.value.lower() == key:
            return m
    raise ValueError(f"unknown explanation method {name!r}")


@dataclass
class SaliencyMap:
    values: np.ndarray  # [H, W], nonnegative, sums to 1
    image_digest: str
    method: Method

    def to_csv(self) -> str:
        return "\n".join(",".join(repr(float(v)) for v in row) for row in self.values) + "\n"

    def to_pgm(self) -> bytes:
        """8-bit binary PGM, scaled so the largest entry is white."""
        h, w = self.values.shape
        peak = self.values.max()
        img = np.zeros_like(self.values) if peak <= 0 else self.values / peak
        body = np.round(img * 255).astype(np.uint8).tobytes()
        return f"P5\n{w} {h}\n255\n".encode() + body


def image_digest(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image, dtype=np.float64).tobytes()).hexdigest()[:16]


def _check_range(x: np.ndarray) -> None:
    if x.size and (x.min() < -PIXEL_TOLERANCE or x.max() > 1 + PIXEL_TOLERANCE):
        raise ValueError(f"image values must lie in [0, 1]; found [{x.min()}, {x.max()}]")


def _class_gradient(spec, params, x: Var, classes: np.ndarray, guided: bool, create_graph: bool) -> Var:
    logits = model_forward(spec, params, x, guided=guided)
    score = ad.sum_(ad.mul(logits, Var(one_hot(classes, spec.num_classes))))
    (g,) = ad.grad(score, [x], create_graph=create_graph, as_arrays=False)
    return g


def raw_attribution(method: ExplMethod, spec: ModelSpec, params, images, classes=None,
                    differentiable: bool = False) -> Var:
    """Unaggregated relevance [N, C, H, W] for the class in ``classes`` (default: predicted)."""
    x = ad.as_var(images)
    if classes is None:
        with ad.no_grad():
            classes = model_forward(spec, params, x.value).value.argmax(axis=1)
    classes = np.asarray(classes)
    kind = method.kind

    with ad.grad_mode(True):
        if kind is Method.INTEGRATED_GRADIENTS:
            total = None
            # left Riemann sum along the straight path from the zero baseline
            for k in range(method.ig_steps):
                alpha = k / method.ig_steps
                if x.requires_grad:
                    xk = ad.scale(x, alpha)
                else:
                    xk = Var(x.value * alpha, requires_grad=True)
                g = _class_gradient(spec, params, xk, classes, False, differentiable)
                total = g if total is None else ad.add(total, g)
            return ad.mul(x, ad.scale(total, 1.0 / method.ig_steps))

        xg = x if x.requires_grad else Var(x.value, requires_grad=True)
        g = _class_gradient(spec, params, xg, classes, kind is Method.GUIDED_BACKPROP, differentiable)
        if kind is Method.GRADIENT_TIMES_INPUT:
            return ad.mul(g, x)
        return g


def normalize_attribution(raw: Var) -> Var:
    """Sum |raw| over channels, then scale each map to unit sum."""
    agg = ad.sum_(ad.abs_(raw), axis=1)  # N,H,W
    totals = agg.value.sum(axis=(1, 2))
    bad = np.flatnonzero(~(totals > 0))
    if bad.size:
        raise DegenerateSaliencyError(bad.tolist())
    return ad.div(agg, ad.sum_(agg, axis=(1, 2), keepdims=True))


def saliency_maps(method: ExplMethod, spec: ModelSpec, params, images, classes=None,
                  differentiable: bool = False, check_range: bool = True, batch_size: int = 128):
    """Normalised maps [N, H, W]; a Var with provenance when ``differentiable``.

    ``check_range=False`` admits unclipped inputs such as noise-perturbed probes.
    Plain maps are computed ``batch_size`` images at a time to bound peak memory.
    """
    x = ad.as_var(images)
    if check_range:
        _check_range(x.value)
    if x.ndim != 4:
        raise ad.ShapeError("saliency", x.shape, ("N", "C", "H", "W"))
    if differentiable:
        maps = normalize_attribution(raw_attribution(method, spec, params, x, classes, True))
        return maps
    out = []
    with ad.no_grad():
        for s in range(0, len(x.value), batch_size):
            cls = None if classes is None else np.asarray(classes)[s : s + batch_size]
            raw = raw_attribution(method, spec, params, Var(x.value[s : s + batch_size]), cls, False)
            out.append(normalize_attribution(Var(raw.value)).value)
    return np.concatenate(out) if out else np.zeros((0,) + x.shape[2:])


def saliency(method: ExplMethod, spec: ModelSpec, params, image, differentiable: bool = False,
             cls=None):
    """Saliency of a single [C, H, W] image."""
    arr = image.value if isinstance(image, Var) else np.asarray(image, dtype=np.float64)
    if arr.ndim != 3:
        raise ad.ShapeError("saliency", arr.shape, ("C", "H", "W"))
    x = ad.reshape(image, (1,) + arr.shape) if isinstance(image, Var) else arr[None]
    classes = None if cls is None else [cls]
    out = saliency_maps(method, spec, params, x, classes, differentiable)
    if differentiable:
        return ad.reshape(out, out.shape[1:])
    return SaliencyMap(out[0], image_digest(arr), method.kind)


def _as_values(m):
    if isinstance(m, SaliencyMap):
        return m.values
    return m


def explanation_loss_per_sample(a, b) -> Var:
    """Mean squared difference over the last two axes."""
    a, b = ad.as_var(_as_values(a)), ad.as_var(_as_values(b))
    if a.shape[-2:] != b.shape[-2:]:
        raise ad.ShapeError("explanation_loss", a.shape, b.shape)
    d = ad.sub(a, b)
    return ad.mean(ad.mul(d, d), axis=(-2, -1))


def explanation_loss(a, b):
    """Mean squared difference between two normalised maps (or batches of maps).

    Returns a float for plain inputs and a Var when either side is a Var.
    """
    differentiable = isinstance(a, Var) or isinstance(b, Var)
    a_val, b_val = _as_values(a), _as_values(b)
    a_shape = a_val.shape
    b_shape = b_val.shape
    if a_shape[-2:] != b_shape[-2:]:
        raise ad.ShapeError("explanation_loss", a_shape, b_shape)
    if differentiable:
        d = ad.sub(ad.as_var(a_val), ad.as_var(b_val))
        return ad.mean(ad.mul(d, d))
    d = np.asarray(a_val, dtype=np.float64) - np.asarray(b_val, dtype=np.float64)
    return float(np.mean(d * d))
