"""Network specifications, desk-scale presets and the masked forward pass."""
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import functional as F
from .masking import MaskedParameter, Pattern, group_shape
from .tensor import ShapeError, Tensor, are_parameters_frozen, frozen_parameters, no_grad

_LOGGER = logging.getLogger(__name__)

Classifier = Callable[[Tensor], Tensor]


class LayerKind(str, Enum):
    CONV = "conv"
    LINEAR = "linear"
    NORM = "norm"
    RELU = "relu"
    MAXPOOL = "maxpool"
    AVGPOOL = "avgpool"
    FLATTEN = "flatten"
    BLOCK = "block"
    """Pre-activation residual block: norm-relu-conv-norm-relu-conv + shortcut"""


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    name: str = ""
    in_size: int = 0
    """Input channels (conv/norm/block) or features (linear)"""

    out_size: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    maskable: bool = True

    @property
    def needs_shortcut(self) -> bool:
        return self.kind == LayerKind.BLOCK and (
            self.stride != 1 or self.in_size != self.out_size
        )


@dataclass(frozen=True)
class NetworkSpec:
    arch: str
    input_shape: Tuple[int, ...]
    num_classes: int
    layers: Tuple[LayerSpec, ...] = field(default_factory=tuple)
    width: Optional[int] = None
    """Preset width (channels or hidden units); part of the spec id"""

    def __post_init__(self):
        self.validate()

    @property
    def spec_id(self) -> str:
        shape = "x".join(str(s) for s in self.input_shape)
        base = f"{self.arch}:{shape}:{self.num_classes}"
        return base if self.width is None else f"{base}:w{self.width}"

    def weight_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Maskable weight tensors in forward order."""
        shapes: Dict[str, Tuple[int, ...]] = {}
        for layer in self.layers:
            if layer.kind == LayerKind.CONV:
                shapes[layer.name] = (layer.out_size, layer.in_size, layer.kernel, layer.kernel)
            elif layer.kind == LayerKind.LINEAR:
                shapes[layer.name] = (layer.out_size, layer.in_size)
            elif layer.kind == LayerKind.BLOCK:
                shapes[f"{layer.name}.conv1"] = (layer.out_size, layer.in_size, 3, 3)
                shapes[f"{layer.name}.conv2"] = (layer.out_size, layer.out_size, 3, 3)
                if layer.needs_shortcut:
                    shapes[f"{layer.name}.shortcut"] = (layer.out_size, layer.in_size, 1, 1)

        return shapes

    def norm_channels(self) -> Dict[str, int]:
        channels: Dict[str, int] = {}
        for layer in self.layers:
            if layer.kind == LayerKind.NORM:
                channels[layer.name] = layer.in_size
            elif layer.kind == LayerKind.BLOCK:
                channels[f"{layer.name}.norm1"] = layer.in_size
                channels[f"{layer.name}.norm2"] = layer.out_size

        return channels

    def head_name(self) -> str:
        linear = [layer.name for layer in self.layers if layer.kind == LayerKind.LINEAR]
        return linear[-1]

    def with_classes(self, num_classes: int) -> "NetworkSpec":
        """Same body with a differently sized final linear layer."""
        head = self.head_name()
        layers = tuple(
            replace(layer, out_size=num_classes) if layer.name == head else layer
            for layer in self.layers
        )
        return NetworkSpec(self.arch, self.input_shape, num_classes, layers, self.width)

    def validate(self) -> None:
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape = _propagate(layer, shape)

        if shape != (self.num_classes,):
            raise ShapeError(f"{self.arch} output", shape, (self.num_classes,))

        if not any(
            layer.maskable
            for layer in self.layers
            if layer.kind in (LayerKind.CONV, LayerKind.LINEAR, LayerKind.BLOCK)
        ):
            raise ShapeError(f"{self.arch}", shape, detail="no maskable layer")


def fans(weight_shape: Tuple[int, ...]) -> Tuple[int, int]:
    """(fan_in, fan_out) of a linear or conv weight."""
    receptive = int(np.prod(weight_shape[2:])) if len(weight_shape) > 2 else 1
    return weight_shape[1] * receptive, weight_shape[0] * receptive


def _propagate(layer: LayerSpec, shape: Tuple[int, ...]) -> Tuple[int, ...]:
    kind = layer.kind
    if kind in (LayerKind.CONV, LayerKind.BLOCK):
        if len(shape) != 3 or shape[0] != layer.in_size:
            raise ShapeError(f"{kind.value} {layer.name}", shape, (layer.in_size,))

        if kind == LayerKind.BLOCK:
            kernel, padding = 3, 1
        else:
            kernel, padding = layer.kernel, layer.padding

        height = F.output_size(shape[1], kernel, layer.stride, padding)
        width = F.output_size(shape[2], kernel, layer.stride, padding)
        if height < 1 or width < 1:
            raise ShapeError(f"{kind.value} {layer.name}", shape, detail="empty output")
        return (layer.out_size, height, width)

    if kind == LayerKind.LINEAR:
        if shape != (layer.in_size,):
            raise ShapeError(f"linear {layer.name}", shape, (layer.in_size,))
        return (layer.out_size,)

    if kind == LayerKind.NORM:
        if shape[0] != layer.in_size:
            raise ShapeError(f"norm {layer.name}", shape, (layer.in_size,))
        return shape

    if kind in (LayerKind.MAXPOOL, LayerKind.AVGPOOL):
        if len(shape) != 3:
            raise ShapeError(f"{kind.value}", shape, detail="expected C x H x W")
        height = F.output_size(shape[1], layer.kernel, layer.stride, layer.padding)
        width = F.output_size(shape[2], layer.kernel, layer.stride, layer.padding)
        if height < 1 or width < 1:
            raise ShapeError(f"{kind.value}", shape, detail="empty output")
        return (shape[0], height, width)

    if kind == LayerKind.FLATTEN:
        return (int(np.prod(shape)),)

    return shape


# -----------------------------------------------------------------------------
# Presets


def desk_cnn(input_shape=(1, 28, 28), num_classes: int = 10, width: int = 32) -> NetworkSpec:
    """Three conv stages (conv-norm-relu-maxpool) and one linear classifier."""
    channels, height, _ = input_shape
    widths = [width, 2 * width, 2 * width]
    layers: List[LayerSpec] = []
    in_size = channels
    for index, out_size in enumerate(widths, start=1):
        layers.extend(
            [
                LayerSpec(LayerKind.CONV, f"conv{index}", in_size, out_size, 3, 1, 1),
                LayerSpec(LayerKind.NORM, f"norm{index}", out_size),
                LayerSpec(LayerKind.RELU),
                LayerSpec(LayerKind.MAXPOOL, kernel=2, stride=2),
            ]
        )
        in_size = out_size
        height = F.output_size(height, 2, 2, 0)

    features = in_size * height * height
    layers.extend(
        [
            LayerSpec(LayerKind.FLATTEN),
            LayerSpec(LayerKind.LINEAR, "fc", features, num_classes),
        ]
    )
    return NetworkSpec("desk_cnn", tuple(input_shape), num_classes, tuple(layers), width)


def desk_resnet8(input_shape=(1, 28, 28), num_classes: int = 10, width: int = 16) -> NetworkSpec:
    """Pre-activation residual network: stem conv, three blocks, linear head."""
    channels, height, _ = input_shape
    layers = [LayerSpec(LayerKind.CONV, "conv1", channels, width, 3, 1, 1)]
    in_size = width
    for index, (out_size, stride) in enumerate(
        [(width, 1), (2 * width, 2), (4 * width, 2)], start=1
    ):
        layers.append(LayerSpec(LayerKind.BLOCK, f"block{index}", in_size, out_size, 3, stride, 1))
        in_size = out_size
        height = F.output_size(height, 3, stride, 1)

    layers.extend(
        [
            LayerSpec(LayerKind.NORM, "norm", in_size),
            LayerSpec(LayerKind.RELU),
            LayerSpec(LayerKind.AVGPOOL, kernel=height, stride=height),
            LayerSpec(LayerKind.FLATTEN),
            LayerSpec(LayerKind.LINEAR, "fc", in_size, num_classes),
        ]
    )
    return NetworkSpec("desk_resnet8", tuple(input_shape), num_classes, tuple(layers), width)


def toy_linear(input_shape=(2,), num_classes: int = 2) -> NetworkSpec:
    """Single bias-free linear layer; the exhaustive-oracle workhorse."""
    features = int(np.prod(input_shape))
    layers = (LayerSpec(LayerKind.LINEAR, "fc", features, num_classes),)
    if len(input_shape) > 1:
        layers = (LayerSpec(LayerKind.FLATTEN),) + layers
    return NetworkSpec("toy_linear", tuple(input_shape), num_classes, layers)


def toy_mlp(input_shape=(2,), num_classes: int = 2, hidden: int = 4) -> NetworkSpec:
    features = int(np.prod(input_shape))
    layers = [
        LayerSpec(LayerKind.LINEAR, "fc1", features, hidden),
        LayerSpec(LayerKind.RELU),
        LayerSpec(LayerKind.LINEAR, "fc2", hidden, num_classes),
    ]
    if len(input_shape) > 1:
        layers.insert(0, LayerSpec(LayerKind.FLATTEN))
    return NetworkSpec("toy_mlp", tuple(input_shape), num_classes, tuple(layers), hidden)


PRESETS: Dict[str, Callable[..., NetworkSpec]] = {
    "desk_cnn": desk_cnn,
    "desk_resnet8": desk_resnet8,
    "toy_linear": toy_linear,
    "toy_mlp": toy_mlp,
}


_WIDTH_ARGS = {"desk_cnn": "width", "desk_resnet8": "width", "toy_mlp": "hidden"}


def network_spec(
    arch: str, input_shape: Tuple[int, ...], num_classes: int, width: Optional[int] = None
) -> NetworkSpec:
    if arch not in PRESETS:
        raise ValueError(f"Unknown architecture '{arch}'. Choices: {list(PRESETS)}")

    kwargs = {}
    if width is not None:
        if arch not in _WIDTH_ARGS:
            raise ValueError(f"Architecture '{arch}' has no width")
        kwargs[_WIDTH_ARGS[arch]] = width

    return PRESETS[arch](input_shape=tuple(input_shape), num_classes=num_classes, **kwargs)


def spec_from_id(spec_id: str) -> NetworkSpec:
    """Inverse of NetworkSpec.spec_id for the presets."""
    try:
        arch, shape_text, classes_text, *rest = spec_id.split(":")
        input_shape = tuple(int(s) for s in shape_text.split("x"))
        num_classes = int(classes_text)
        if len(rest) > 1 or (rest and not rest[0].startswith("w")):
            raise ValueError(spec_id)
        width = int(rest[0][1:]) if rest else None
    except ValueError as err:
        raise ValueError(f"Malformed network spec id: {spec_id}") from err

    return network_spec(arch, input_shape, num_classes, width)


# -----------------------------------------------------------------------------


class NormState:
    """Running statistics of one non-affine batch-norm layer."""

    def __init__(self, channels: int, mean: Optional[np.ndarray] = None, var: Optional[np.ndarray] = None):
        self.running_mean = np.zeros(channels) if mean is None else np.array(mean, dtype=np.float64)
        self.running_var = np.ones(channels) if var is None else np.array(var, dtype=np.float64)

    def copy(self) -> "NormState":
        return NormState(len(self.running_mean), self.running_mean, self.running_var)


class Network:
    """A NetworkSpec bound to weights, scores/masks and norm statistics.

    Frozen weights are shared, never copied, unless `trainable_theta` is set.
    """

    def __init__(
        self,
        spec: NetworkSpec,
        weights: Dict[str, np.ndarray],
        scores: Dict[str, np.ndarray],
        ratio: float = 1.0,
        pattern: Pattern = Pattern.ELEMENT,
        masks: Optional[Dict[str, np.ndarray]] = None,
        norm_stats: Optional[Dict[str, NormState]] = None,
        trainable_theta: bool = False,
    ):
        self.spec = spec
        self.ratio = float(ratio)
        self.pattern = Pattern(pattern)
        self.params: Dict[str, MaskedParameter] = {}
        for name, shape in spec.weight_shapes().items():
            theta = weights[name]
            if theta.shape != shape:
                raise ShapeError(f"weight {name}", theta.shape, shape)

            if trainable_theta:
                theta = np.array(theta)

            fixed = None if masks is None else masks[name]
            self.params[name] = MaskedParameter(
                theta, scores[name], self.pattern, self.ratio, fixed_mask=fixed
            )

        channels = spec.norm_channels()
        if norm_stats is None:
            self.norms = {name: NormState(c) for name, c in channels.items()}
        else:
            self.norms = {name: norm_stats[name].copy() for name in channels}

        self.set_trainable(scores=masks is None, theta=trainable_theta)
        self.features: Optional[Tensor] = None

    @property
    def dtype(self):
        first = next(iter(self.params.values()))
        return first.theta.dtype

    def set_trainable(self, scores: bool, theta: bool) -> None:
        for param in self.params.values():
            param.scores.requires_grad = scores
            param.theta.requires_grad = theta

    def trainable_tensors(self) -> List[Tensor]:
        tensors: List[Tensor] = []
        if are_parameters_frozen():
            return tensors

        for param in self.params.values():
            if param.scores.requires_grad:
                tensors.append(param.scores)
            if param.theta.requires_grad:
                tensors.append(param.theta)
        return tensors

    @contextmanager
    def frozen(self) -> Iterator[None]:
        """Stop gradients into scores and weights on this thread (attack passes)."""
        with frozen_parameters():
            yield

    def masks(self) -> Dict[str, np.ndarray]:
        return {name: param.current_mask() for name, param in self.params.items()}

    def weights(self) -> Dict[str, np.ndarray]:
        return {name: param.theta.data for name, param in self.params.items()}

    def scores(self) -> Dict[str, np.ndarray]:
        return {name: param.scores.data for name, param in self.params.items()}

    def norm_stats(self) -> Dict[str, NormState]:
        return {name: state.copy() for name, state in self.norms.items()}

    # -------------------------------------------------------------------------

    def forward(
        self,
        x: Union[Tensor, np.ndarray],
        train: bool = False,
        update_stats: bool = True,
        keep_features: bool = False,
    ) -> Tensor:
        """Logits of the masked network.

        With `keep_features`, the activation after the first ReLU that follows
        the last convolution is stored in `self.features`.
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))

        expected = tuple(self.spec.input_shape)
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"{self.spec.arch} input", x.shape, (-1,) + expected)

        last_conv = max(
            (i for i, layer in enumerate(self.spec.layers) if layer.kind in (LayerKind.CONV, LayerKind.BLOCK)),
            default=-1,
        )
        capture_pending = keep_features and last_conv >= 0
        self.features = None

        for index, layer in enumerate(self.spec.layers):
            kind = layer.kind
            if kind == LayerKind.CONV:
                x = F.conv2d(x, self.params[layer.name].effective(), layer.stride, layer.padding)
            elif kind == LayerKind.LINEAR:
                x = F.linear(x, self.params[layer.name].effective())
            elif kind == LayerKind.NORM:
                x = self._norm(layer.name, x, train, update_stats)
            elif kind == LayerKind.RELU:
                x = x.relu()
                if capture_pending and index > last_conv:
                    self.features = x
                    capture_pending = False
            elif kind == LayerKind.MAXPOOL:
                x = F.max_pool2d(x, layer.kernel, layer.stride, layer.padding)
            elif kind == LayerKind.AVGPOOL:
                x = F.avg_pool2d(x, layer.kernel, layer.stride, layer.padding)
            elif kind == LayerKind.FLATTEN:
                x = F.flatten(x)
            elif kind == LayerKind.BLOCK:
                x = self._block(layer, x, train, update_stats)

        return x

    __call__ = forward

    def _norm(self, name: str, x: Tensor, train: bool, update_stats: bool) -> Tensor:
        state = self.norms[name]
        return F.batch_norm(x, state.running_mean, state.running_var, train, update_stats)

    def _block(self, layer: LayerSpec, x: Tensor, train: bool, update_stats: bool) -> Tensor:
        name = layer.name
        out = self._norm(f"{name}.norm1", x, train, update_stats).relu()
        shortcut = x
        if layer.needs_shortcut:
            shortcut = F.conv2d(out, self.params[f"{name}.shortcut"].effective(), layer.stride, 0)

        out = F.conv2d(out, self.params[f"{name}.conv1"].effective(), layer.stride, 1)
        out = self._norm(f"{name}.norm2", out, train, update_stats).relu()
        out = F.conv2d(out, self.params[f"{name}.conv2"].effective(), 1, 1)
        return out + shortcut

    def classifier(self, train: bool = False, update_stats: bool = False) -> Classifier:
        """Logit function with fixed mode, as consumed by the attacks."""

        def logits(x: Tensor) -> Tensor:
            with self.frozen():
                return self.forward(x, train=train, update_stats=update_stats)

        return logits

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        labels = []
        with no_grad():
            for start in range(0, len(x), batch_size):
                logits = self.forward(x[start : start + batch_size], train=False)
                labels.append(logits.data.argmax(axis=1))

        return np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)

    def popcounts(self) -> Dict[str, int]:
        return {name: int(param.current_mask().sum()) for name, param in self.params.items()}
