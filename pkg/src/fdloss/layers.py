"""Base CNN architectures as ordered layer graphs with named parameters.

Three desk-scale families are provided (``vgg_like``, ``resnet_like``,
``alexnet_like``), plus a two-convolution ``tiny`` family for quick
experiments. Every graph records the index of the layer whose output
is the last convolutional activation after its ReLU; :meth:`LayerGraph.forward`
returns that activation alongside the logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import functional as F
from .autodiff import Tensor, relu
from .errors import ConfigError, DimensionError

FAMILIES = ("vgg_like", "resnet_like", "alexnet_like", "tiny")


@dataclass(frozen=True)
class ArchSpec:
    family: str = "vgg_like"
    width_scale: Fraction | float = 1
    input_shape: tuple[int, int, int] = (32, 32, 3)
    n_classes: int = 10

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown architecture family {self.family!r}", key="family")
        if not float(self.width_scale) > 0:
            raise ConfigError("width_scale must be positive", key="width_scale")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be h x w x c, got {self.input_shape}", key="input_shape")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2", key="n_classes")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))

    def width(self, base: int) -> int:
        return max(1, int(round(base * float(self.width_scale))))


# -- layer descriptions ----------------------------------------------------


@dataclass
class Conv:
    name: str
    k: int
    c_in: int
    c_out: int
    stride: int = 1
    padding: str = "same"

    def param_shapes(self):
        return {f"{self.name}.weight": (self.k, self.k, self.c_in, self.c_out), f"{self.name}.bias": (self.c_out,)}

    def out_shape(self, shape):
        h, w, c = shape
        if c != self.c_in:
            raise DimensionError(f"{self.name}: expects {self.c_in} channels, got {c}")
        pad = (self.k - 1) // 2 if self.padding == "same" else 0
        if self.k > h + 2 * pad or self.k > w + 2 * pad:
            raise DimensionError(f"{self.name}: kernel {self.k} larger than input {h}x{w}")
        return (F.output_extent(h, self.k, self.stride, pad), F.output_extent(w, self.k, self.stride, pad), self.c_out)

    def __call__(self, x, params):
        return F.conv2d(x, params[f"{self.name}.weight"], params[f"{self.name}.bias"], self.stride, self.padding)


@dataclass
class ReLU:
    def param_shapes(self):
        return {}

    def out_shape(self, shape):
        return shape

    def __call__(self, x, params):
        return relu(x)


@dataclass
class Pool:
    window: int
    stride: int | None = None
    kind: str = "max"

    def param_shapes(self):
        return {}

    def out_shape(self, shape):
        h, w, c = shape
        if self.window > h or self.window > w:
            raise DimensionError(f"pool window {self.window} exceeds {h}x{w}")
        s = self.stride or self.window
        return (F.output_extent(h, self.window, s, 0), F.output_extent(w, self.window, s, 0), c)

    def __call__(self, x, params):
        return F.pool2d(x, self.window, self.stride, self.kind)


@dataclass
class Residual:
    """``relu(conv_b(relu(conv_a(x))) + skip(x))`` with a 1x1 projection skip
    when the channel count changes."""

    name: str
    c_in: int
    c_out: int
    k: int = 3

    @property
    def projects(self) -> bool:
        return self.c_in != self.c_out

    def param_shapes(self):
        shapes = {
            f"{self.name}.conv_a.weight": (self.k, self.k, self.c_in, self.c_out),
            f"{self.name}.conv_a.bias": (self.c_out,),
            f"{self.name}.conv_b.weight": (self.k, self.k, self.c_out, self.c_out),
            f"{self.name}.conv_b.bias": (self.c_out,),
        }
        if self.projects:
            shapes[f"{self.name}.proj.weight"] = (1, 1, self.c_in, self.c_out)
            shapes[f"{self.name}.proj.bias"] = (self.c_out,)
        return shapes

    def out_shape(self, shape):
        h, w, c = shape
        if c != self.c_in:
            raise DimensionError(f"{self.name}: expects {self.c_in} channels, got {c}")
        return (h, w, self.c_out)

    def __call__(self, x, params):
        return residual_block(x, params, self.name, projects=self.projects)


@dataclass
class Flatten:
    def param_shapes(self):
        return {}

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def __call__(self, x, params):
        return F.flatten(x)


@dataclass
class GlobalAvgPool:
    def param_shapes(self):
        return {}

    def out_shape(self, shape):
        return (shape[-1],)

    def __call__(self, x, params):
        return F.global_avg_pool(x)


@dataclass
class Dense:
    name: str
    n_in: int
    n_out: int

    def param_shapes(self):
        return {f"{self.name}.weight": (self.n_in, self.n_out), f"{self.name}.bias": (self.n_out,)}

    def out_shape(self, shape):
        if shape != (self.n_in,):
            raise DimensionError(f"{self.name}: expects {self.n_in} features, got {shape}")
        return (self.n_out,)

    def __call__(self, x, params):
        return F.dense(x, params[f"{self.name}.weight"], params[f"{self.name}.bias"])


def residual_block(x, params, name: str, projects: bool = False) -> Tensor:
    p = lambda part: (params[f"{name}.{part}.weight"], params[f"{name}.{part}.bias"])  # noqa: E731
    h = relu(F.conv2d(x, *p("conv_a"), padding="same"))
    h = F.conv2d(h, *p("conv_b"), padding="same")
    skip = F.conv2d(x, *p("proj"), padding="valid") if projects else x
    return relu(h + skip)


def fan_in(shape: tuple[int, ...]) -> int:
    """Inputs feeding one output unit: ``k*k*c_in`` for kernels, rows for dense."""
    return int(np.prod(shape[:-1]))


def he_normal(shape, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in(shape)), size=shape)


# -- the graph -------------------------------------------------------------


@dataclass
class LayerGraph:
    spec: ArchSpec
    layers: list
    last_conv_tap: int
    seed: int | None = None
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        self.shapes = self._audit()
        if not self.params:
            self.params = {n: Tensor(np.zeros(s), requires_grad=True, name=n) for n, s in self.param_shapes().items()}

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for layer in self.layers:
            for name, shape in layer.param_shapes().items():
                if name in shapes:
                    raise ConfigError(f"duplicate parameter name {name!r}")
                shapes[name] = shape
        return shapes

    def _audit(self) -> list[tuple[int, ...]]:
        shape = self.spec.input_shape
        shapes = []
        for layer in self.layers:
            shape = layer.out_shape(shape)
            shapes.append(shape)
        if shapes[-1] != (self.spec.n_classes,):
            raise DimensionError(f"final output {shapes[-1]} does not match {self.spec.n_classes} classes")
        if len(shapes[self.last_conv_tap]) != 3:
            raise DimensionError("last_conv_tap must point at an h x w x d activation")
        return shapes

    @property
    def last_conv_shape(self) -> tuple[int, int, int]:
        return self.shapes[self.last_conv_tap]

    @property
    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ConfigError("parameter names do not match the architecture")
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != self.params[name].shape:
                raise DimensionError(f"{name}: shape {value.shape} != {self.params[name].shape}")
            self.params[name] = Tensor(value.copy(), requires_grad=True, name=name)

    def forward(self, x) -> tuple[Tensor, Tensor]:
        """Return ``(logits, last_conv)`` from one pass over ``x``."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        expected = self.spec.input_shape
        if x.shape[-3:] != expected or x.ndim not in (3, 4):
            raise DimensionError(f"input shape {x.shape} does not match {expected}")
        tap = None
        for i, layer in enumerate(self.layers):
            x = layer(x, self.params)
            if i == self.last_conv_tap:
                tap = x
        return x, tap

    __call__ = forward

    def features(self, x) -> Tensor:
        """Run only up to the last convolutional activation."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.layers[: self.last_conv_tap + 1]:
            x = layer(x, self.params)
        return x

    def head(self, last_conv) -> Tensor:
        """Run the layers after the tap (the classifier part)."""
        x = last_conv
        for layer in self.layers[self.last_conv_tap + 1 :]:
            x = layer(x, self.params)
        return x


# -- families ---------------------------------------------------------------


def _min_extent(spec: ArchSpec) -> int:
    return {"vgg_like": 8, "resnet_like": 8, "alexnet_like": 16, "tiny": 8}[spec.family]


def _vgg_like(spec: ArchSpec):
    h, w, c = spec.input_shape
    w1, w2 = spec.width(16), spec.width(32)
    hidden = spec.width(64)
    layers = [
        Conv("conv1", 3, c, w1), ReLU(),
        Conv("conv2", 3, w1, w1), ReLU(), Pool(2),
        Conv("conv3", 3, w1, w2), ReLU(),
        Conv("conv4", 3, w2, w2), ReLU(), Pool(2),
        Conv("conv5", 3, w2, w2), ReLU(),
    ]
    tap = len(layers) - 1
    side = (h // 4 // 2) * (w // 4 // 2)
    layers += [Pool(2), Flatten(), Dense("fc1", side * w2, hidden), ReLU(), Dense("fc2", hidden, spec.n_classes)]
    return layers, tap


def _resnet_like(spec: ArchSpec):
    _, _, c = spec.input_shape
    w1, w2 = spec.width(16), spec.width(32)
    layers = [
        Conv("stem", 3, c, w1), ReLU(),
        Residual("block1", w1, w1), Pool(2),
        Residual("block2", w1, w2), Pool(2),
        Residual("block3", w2, w2),
        Residual("block4", w2, w2),
    ]
    tap = len(layers) - 1
    layers += [GlobalAvgPool(), Dense("fc", w2, spec.n_classes)]
    return layers, tap


def _alexnet_like(spec: ArchSpec):
    h, w, c = spec.input_shape
    w1, w2 = spec.width(16), spec.width(32)
    hidden = spec.width(64)
    layers = [
        Conv("conv1", 5, c, w1), ReLU(), Pool(3, 2),
        Conv("conv2", 5, w1, w2), ReLU(), Pool(3, 2),
        Conv("conv3", 3, w2, w2), ReLU(),
        Conv("conv4", 3, w2, w2), ReLU(),
        Conv("conv5", 3, w2, w2), ReLU(),
    ]
    tap = len(layers) - 1
    ext = lambda n: F.output_extent(F.output_extent(F.output_extent(n, 3, 2, 0), 3, 2, 0), 3, 2, 0)  # noqa: E731
    layers += [Pool(3, 2), Flatten(), Dense("fc1", ext(h) * ext(w) * w2, hidden), ReLU(), Dense("fc2", hidden, spec.n_classes)]
    return layers, tap


def _tiny(spec: ArchSpec):
    """Two convolutions around one pool and a GAP head; a quick testbed."""
    _, _, c = spec.input_shape
    w1, w2 = spec.width(8), spec.width(16)
    layers = [Conv("conv1", 3, c, w1), ReLU(), Pool(2), Conv("conv2", 3, w1, w2), ReLU()]
    tap = len(layers) - 1
    layers += [GlobalAvgPool(), Dense("fc", w2, spec.n_classes)]
    return layers, tap


_BUILDERS = {"vgg_like": _vgg_like, "resnet_like": _resnet_like, "alexnet_like": _alexnet_like, "tiny": _tiny}
_FINAL_WIDTH = {"vgg_like": 32, "resnet_like": 32, "alexnet_like": 32, "tiny": 16}


def final_width(spec: ArchSpec) -> int:
    """Channel count of the last convolutional activation for ``spec``."""
    return spec.width(_FINAL_WIDTH[spec.family])


def init_params(model: LayerGraph, seed: int | None) -> None:
    """He-normal weights (in layer order) and zero biases from one generator."""
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        if name.endswith(".bias"):
            t.data[...] = 0.0
        else:
            t.data[...] = he_normal(t.shape, rng)


def build(spec: ArchSpec, seed: int | None = None) -> LayerGraph:
    """Build and initialise one base model. ``seed=None`` draws OS entropy."""
    h, w, _ = spec.input_shape
    if min(h, w) < _min_extent(spec):
        raise ConfigError(
            f"{spec.family} needs inputs of at least {_min_extent(spec)}x{_min_extent(spec)}, got {h}x{w}",
            key="input_shape",
        )
    layers, tap = _BUILDERS[spec.family](spec)
    try:
        model = LayerGraph(spec, layers, tap, seed=seed)
    except DimensionError as exc:
        raise ConfigError(f"{spec.family} cannot handle input {spec.input_shape}: {exc}", key="input_shape") from exc
    init_params(model, seed)
    return model
