"""The detection network: fixed topology, forward/backward, multi-task
loss, SGD training and weight-file serialization.

Topology (all convolutions same-padded, stride 1):

    encoder   conv(5,64,3) + ReLU, conv(64,64,3) + ReLU
    pool      2x2 max pool (indices kept for the decoders)
    stack     dconv1(64,128,3) .. dconv7(128,128,3) with dilations
              (1, 1, 2, 4, 8, 16, 32), then conv(128,64,1); each stack
              layer runs conv -> dropout -> ReLU while training
    branches  each: max-unpool back to input resolution, then
              conv(64,64,3) + ReLU followed by conv(64,4,3) + ReLU
              (objectness, softmax over channels) or conv(64,24,3)
              (corner offsets, linear)

Channel widths are parameterizable so tests can gradient-check a reduced
network with the identical topology; ``canonical_architecture()`` is the
real model.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateSceneError,
    DivergenceError,
    FormatError,
    InvalidArgumentError,
)
from .tensorops import (
    ConvSpec,
    Tensor,
    conv2d,
    conv2d_backward,
    distinct_scale_receptive_fields,
    dropout,
    dropout_backward,
    maxpool2,
    maxpool2_backward,
    maxunpool2,
    maxunpool2_backward,
    relu,
    relu_backward,
    softmax_channels,
)

NUM_CLASSES = 4
CORNER_CHANNELS = 24

STACK_DILATIONS = (1, 1, 2, 4, 8, 16, 32)

WEIGHTS_MAGIC = b"LMNW"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class LayerDef:
    name: str
    spec: ConvSpec
    relu: bool = True
    dropout: bool = False


@dataclass(frozen=True)
class Architecture:
    encoder: tuple[LayerDef, ...]
    stack: tuple[LayerDef, ...]
    objectness: tuple[LayerDef, ...]
    corners: tuple[LayerDef, ...]

    def all_layers(self) -> tuple[LayerDef, ...]:
        return self.encoder + self.stack + self.objectness + self.corners

    def layer(self, name: str) -> LayerDef:
        for layer in self.all_layers():
            if layer.name == name:
                return layer
        raise InvalidArgumentError(f"unknown layer {name!r}")

    @property
    def in_channels(self) -> int:
        return self.encoder[0].spec.in_channels


def architecture(
    in_channels: int = 5, base_channels: int = 64, stack_channels: int = 128
) -> Architecture:
    base, stack = base_channels, stack_channels
    dconvs = [
        LayerDef(
            f"dconv{i + 1}",
            ConvSpec.same_padded(base if i == 0 else stack, stack, 3, dilation=d),
            dropout=True,
        )
        for i, d in enumerate(STACK_DILATIONS)
    ]
    return Architecture(
        encoder=(
            LayerDef("enc_conv1", ConvSpec.same_padded(in_channels, base, 3)),
            LayerDef("enc_conv2", ConvSpec.same_padded(base, base, 3)),
        ),
        stack=tuple(dconvs)
        + (LayerDef("trunk_conv", ConvSpec.same_padded(stack, base, 1), dropout=True),),
        objectness=(
            LayerDef("obj_conv1", ConvSpec.same_padded(base, base, 3)),
            LayerDef("obj_conv2", ConvSpec.same_padded(base, NUM_CLASSES, 3)),
        ),
        corners=(
            LayerDef("cor_conv1", ConvSpec.same_padded(base, base, 3)),
            LayerDef("cor_conv2", ConvSpec.same_padded(base, CORNER_CHANNELS, 3), relu=False),
        ),
    )


_CANONICAL: Architecture | None = None


def canonical_architecture() -> Architecture:
    global _CANONICAL
    if _CANONICAL is None:
        _CANONICAL = architecture()
    return _CANONICAL


def stack_coverage_table(arch: Architecture | None = None) -> list[int]:
    """Per-layer context window of the dilated stack (square, so one int
    per layer), counting each dilation scale once."""
    arch = arch or canonical_architecture()
    return [h for h, _ in distinct_scale_receptive_fields([l.spec for l in arch.stack])]


@dataclass
class LMNetParams:
    """Architecture plus its tensors, keyed '<layer>.weight' / '<layer>.bias'."""

    arch: Architecture
    tensors: dict[str, np.ndarray]

    def weight(self, name: str) -> np.ndarray:
        return self.tensors[f"{name}.weight"]

    def bias(self, name: str) -> np.ndarray:
        return self.tensors[f"{name}.bias"]


def build(seed: int = 0, arch: Architecture | None = None) -> LMNetParams:
    """Initialize parameters: weights uniform in +-1/sqrt(fan_in), biases
    zero. Deterministic per seed."""
    arch = arch or canonical_architecture()
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for layer in arch.all_layers():
        spec = layer.spec
        fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1]
        bound = 1.0 / np.sqrt(fan_in)
        tensors[f"{layer.name}.weight"] = rng.uniform(
            -bound, bound, size=spec.weight_shape()
        ).astype(np.float32)
        tensors[f"{layer.name}.bias"] = np.zeros(spec.out_channels, dtype=np.float32)
    return LMNetParams(arch, tensors)


@dataclass
class LayerTrace:
    """Backward-pass state of one layer.

    ``act`` holds the layer's output values. For ReLU layers the ReLU is
    applied in place, so ``act`` is the post-activation map; its sign
    pattern equals the pre-activation one, which is all the ReLU backward
    needs.
    """

    x_in: Tensor
    act: Tensor
    mask: Tensor | None = None


@dataclass
class ForwardTrace:
    """Everything backward needs, plus the outputs themselves."""

    layers: dict[str, LayerTrace] = field(default_factory=dict)
    pool_indices: np.ndarray | None = None
    pre_pool_shape: tuple[int, ...] | None = None
    unpooled_shape: tuple[int, ...] | None = None
    objectness: Tensor | None = None  # softmax probabilities
    obj_logits: Tensor | None = None  # post-ReLU, pre-softmax
    corners: Tensor | None = None


def _layer_forward(
    layer: LayerDef,
    x: Tensor,
    params: LMNetParams,
    trace: ForwardTrace,
    training: bool,
    dropout_rate: float,
    seed_root,
) -> Tensor:
    out = conv2d(x, params.weight(layer.name), params.bias(layer.name), layer.spec)
    mask = None
    if layer.dropout and training and dropout_rate > 0.0:
        seed = np.random.SeedSequence([seed_root, _layer_seed_id(layer.name)])
        out, mask = dropout(out, dropout_rate, seed, training=True)
    if layer.relu:
        np.maximum(out, np.float32(0.0), out=out)
    trace.layers[layer.name] = LayerTrace(x_in=x, act=out, mask=mask)
    return out


def _layer_seed_id(name: str) -> int:
    return int.from_bytes(name.encode(), "little") % (2**31)


def forward(
    params: LMNetParams,
    fvmap: Tensor,
    training: bool = False,
    seed: int = 0,
    dropout_rate: float = 0.5,
) -> tuple[Tensor, Tensor, ForwardTrace]:
    """Run the network on a [in_ch, H, W] map (H, W even).

    Returns (objectness probabilities [4, H, W], corner offsets
    [24, H, W], trace). Dropout fires only when ``training``; inference
    is deterministic.
    """
    x = np.ascontiguousarray(fvmap, dtype=np.float32)
    arch = params.arch
    if x.ndim != 3 or x.shape[0] != arch.in_channels:
        raise InvalidArgumentError(
            f"input must be [{arch.in_channels}, H, W], got {tuple(x.shape)}"
        )
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise InvalidArgumentError(
            f"spatial size {x.shape[1]}x{x.shape[2]} must be divisible by 2"
        )
    trace = ForwardTrace()
    args = (params, trace, training, dropout_rate, seed)

    for layer in arch.encoder:
        x = _layer_forward(layer, x, *args)
    trace.pre_pool_shape = x.shape
    x, trace.pool_indices = maxpool2(x)
    for layer in arch.stack:
        x = _layer_forward(layer, x, *args)

    trunk = x
    trace.unpooled_shape = trace.pre_pool_shape

    # Both branches unpool the same trunk with the same indices; the
    # result is shared read-only.
    unpooled = maxunpool2(trunk, trace.pool_indices, trace.unpooled_shape)
    xo = unpooled
    for layer in arch.objectness:
        xo = _layer_forward(layer, xo, *args)
    trace.obj_logits = xo
    trace.objectness = softmax_channels(xo)

    xc = unpooled
    for layer in arch.corners:
        xc = _layer_forward(layer, xc, *args)
    trace.corners = xc

    return trace.objectness, trace.corners, trace


def _layer_backward(
    layer: LayerDef, g: Tensor, params: LMNetParams, trace: ForwardTrace, grads: dict
) -> Tensor:
    t = trace.layers[layer.name]
    if layer.relu:
        g = relu_backward(t.act, g)
    if t.mask is not None:
        g = dropout_backward(t.mask, g)
    gx, gw, gb = conv2d_backward(t.x_in, params.weight(layer.name), g, layer.spec)
    grads[f"{layer.name}.weight"] = grads.get(f"{layer.name}.weight", 0) + gw
    grads[f"{layer.name}.bias"] = grads.get(f"{layer.name}.bias", 0) + gb
    return gx


def backward(
    params: LMNetParams,
    trace: ForwardTrace,
    grad_obj_logits: Tensor,
    grad_corners: Tensor,
) -> dict[str, np.ndarray]:
    """Parameter gradients given output-side gradients.

    ``grad_obj_logits`` is the gradient at the objectness branch's
    post-ReLU, pre-softmax map: the loss fuses softmax with
    cross-entropy, so the softmax Jacobian is already folded in.
    """
    arch = params.arch
    grads: dict[str, np.ndarray] = {}

    g = np.ascontiguousarray(grad_corners, dtype=np.float32)
    for layer in reversed(arch.corners):
        g = _layer_backward(layer, g, params, trace, grads)
    g_trunk = maxunpool2_backward(trace.pool_indices, g)

    g = np.ascontiguousarray(grad_obj_logits, dtype=np.float32)
    for layer in reversed(arch.objectness):
        g = _layer_backward(layer, g, params, trace, grads)
    g_trunk = g_trunk + maxunpool2_backward(trace.pool_indices, g)

    g = g_trunk
    for layer in reversed(arch.stack):
        g = _layer_backward(layer, g, params, trace, grads)
    g = maxpool2_backward(trace.pool_indices, g, trace.pre_pool_shape)
    for layer in reversed(arch.encoder):
        g = _layer_backward(layer, g, params, trace, grads)
    return grads


# ---------------------------------------------------------------------------
# Loss


@dataclass
class LossTargets:
    """Per-pixel training targets for one scene.

    ``class_map``: int [H, W]; -1 for cells with no point, else a class id
    (0 background). ``corner_targets``: float32 [24, H, W], meaningful on
    object pixels. ``size_map``: projected-point count of the instance a
    pixel belongs to. ``class_mean_sizes``: per-class mean instance size
    over the training set (index 0 unused).
    """

    class_map: np.ndarray
    corner_targets: np.ndarray
    size_map: np.ndarray
    class_mean_sizes: np.ndarray

    @property
    def object_mask(self) -> np.ndarray:
        return self.class_map > 0

    @property
    def background_mask(self) -> np.ndarray:
        return self.class_map == 0

    @property
    def num_object(self) -> int:
        return int(self.object_mask.sum())

    @property
    def num_background(self) -> int:
        return int(self.background_mask.sum())


def pointwise_weights(
    targets: LossTargets, m: float
) -> tuple[np.ndarray, np.ndarray]:
    """Re-weighting maps (w_obj, w_cor), float32 [H, W].

    On object pixels w_cor is the class's mean instance size over the
    pixel's own instance size (small objects weigh more); elsewhere 1.
    Background pixels get w_obj scaled by m * |O| / |O^c| to balance the
    class skew; object pixels keep w_obj = w_cor. Cells without a point
    carry weight 0 and never contribute to the loss.
    """
    obj = targets.object_mask
    bac = targets.background_mask
    n_obj, n_bac = targets.num_object, targets.num_background
    if n_bac == 0:
        raise DegenerateSceneError("scene has no background pixels")

    w_cor = np.ones(targets.class_map.shape, dtype=np.float32)
    if n_obj:
        sizes = targets.size_map[obj]
        if np.any(sizes <= 0):
            raise InvalidArgumentError("object pixels must have positive sizes")
        classes = targets.class_map[obj]
        w_cor[obj] = (targets.class_mean_sizes[classes] / sizes).astype(np.float32)

    w_bac = np.ones_like(w_cor)
    w_bac[bac] = np.float32(m * n_obj / n_bac)

    w_obj = w_bac * w_cor
    invalid = targets.class_map < 0
    w_obj[invalid] = 0.0
    w_cor[invalid] = 0.0
    return w_obj, w_cor


def smooth_l1(x: np.ndarray) -> np.ndarray:
    """Quadratic below 1, linear above: 0.5 x^2 or |x| - 0.5."""
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


def loss(
    objectness: Tensor,
    corners: Tensor,
    targets: LossTargets,
    weights: tuple[np.ndarray, np.ndarray],
) -> tuple[float, Tensor, Tensor]:
    """Re-weighted multi-task loss.

    Sum over valid pixels of w_obj * cross-entropy(objectness, class)
    plus, over object pixels, w_cor * smooth-L1 of the 24 corner-offset
    residuals. Returns (scalar loss, gradient at the objectness logits
    with softmax folded in, gradient at the corner map).
    """
    cls = targets.class_map
    if cls.max(initial=-1) >= NUM_CLASSES:
        raise InvalidArgumentError(
            f"target class {int(cls.max())} outside 0..{NUM_CLASSES - 1}"
        )
    w_obj, w_cor = weights
    valid = cls >= 0
    obj = targets.object_mask

    probs = np.asarray(objectness, dtype=np.float32)
    h, w = cls.shape
    safe_cls = np.where(valid, cls, 0)
    p_target = np.take_along_axis(probs, safe_cls[None], axis=0)[0]
    ce = -np.log(np.maximum(p_target, 1e-12))
    l_obj = float(np.sum(ce[valid].astype(np.float64) * w_obj[valid]))

    grad_logits = probs * w_obj[None]
    rows, cols = np.nonzero(valid)
    grad_logits[cls[valid], rows, cols] -= w_obj[valid]

    residual = np.asarray(corners, dtype=np.float32) - targets.corner_targets
    grad_corners = np.zeros_like(residual)
    l_cor = 0.0
    if obj.any():
        r_obj = residual[:, obj]
        l_cor = float(
            np.sum(smooth_l1(r_obj).sum(axis=0).astype(np.float64) * w_cor[obj])
        )
        grad_corners[:, obj] = smooth_l1_grad(r_obj) * w_cor[obj][None]

    return l_obj + l_cor, grad_logits, grad_corners


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    learning_rate: float = 1e-6
    epochs: int = 200
    batch_size: int = 4
    background_balance: float = 4.0
    dropout_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise InvalidArgumentError("learning rate, epochs, batch size must be positive")
        if self.background_balance <= 0:
            raise InvalidArgumentError("background balance must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidArgumentError("dropout rate must be in [0, 1)")


@dataclass
class TrainSample:
    """One encoded scene ready for the optimizer."""

    fvmap: np.ndarray  # [in_ch, H, W] float32
    targets: LossTargets


def sgd_step(params: LMNetParams, grads: dict[str, np.ndarray], lr: float) -> LMNetParams:
    """Plain SGD, p <- p - lr * g, in place."""
    for name, tensor in params.tensors.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}")
        tensor -= np.float32(lr) * g
    return params


def train(
    params: LMNetParams, dataset: list[TrainSample], cfg: TrainConfig
) -> tuple[LMNetParams, list[float]]:
    """Mini-batch SGD over the dataset, deterministic per seed.

    Batch gradients are averaged over the batch. The returned history
    holds one entry per epoch: the mean of the batch losses observed
    during that epoch (each computed before its update).
    """
    if not dataset:
        raise InvalidArgumentError("empty training dataset")
    if all(s.targets.num_object == 0 for s in dataset):
        raise DegenerateSceneError("no object pixels anywhere in the dataset")

    weight_maps = [
        pointwise_weights(s.targets, cfg.background_balance) for s in dataset
    ]
    rng = np.random.default_rng(cfg.seed)
    history: list[float] = []
    training = cfg.dropout_rate > 0.0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            scale = 1.0 / len(batch)
            acc: dict[str, np.ndarray] = {}
            total = 0.0
            for i in batch:
                sample = dataset[int(i)]
                sample_seed = int(
                    np.random.SeedSequence(
                        [cfg.seed, epoch, start, int(i)]
                    ).generate_state(1)[0]
                )
                probs, corners, trace = forward(
                    params,
                    sample.fvmap,
                    training=training,
                    seed=sample_seed,
                    dropout_rate=cfg.dropout_rate,
                )
                value, g_logits, g_corners = loss(
                    probs, corners, sample.targets, weight_maps[int(i)]
                )
                total += value
                grads = backward(params, trace, g_logits, g_corners)
                for name, g in grads.items():
                    acc[name] = acc.get(name, 0) + g * np.float32(scale)
            batch_loss = total * scale
            if not np.isfinite(batch_loss):
                raise DivergenceError("non-finite training loss")
            sgd_step(params, acc, cfg.learning_rate)
            batch_losses.append(batch_loss)
        history.append(float(np.mean(batch_losses)))
    return params, history


def evaluate_dataset_loss(
    params: LMNetParams, dataset: list[TrainSample], m: float
) -> float:
    """Mean per-scene loss with dropout off."""
    total = 0.0
    for sample in dataset:
        probs, corners, _ = forward(params, sample.fvmap, training=False)
        value, _, _ = loss(
            probs, corners, sample.targets, pointwise_weights(sample.targets, m)
        )
        total += value
    return total / len(dataset)


# ---------------------------------------------------------------------------
# Weight files


def save_weights(params: LMNetParams, path) -> None:
    """Write tensors in canonical layer order (little-endian)."""
    items = []
    for layer in params.arch.all_layers():
        for kind in ("weight", "bias"):
            name = f"{layer.name}.{kind}"
            items.append((name, params.tensors[name]))
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", WEIGHTS_VERSION, len(items)))
        for name, tensor in items:
            encoded = name.encode()
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", tensor.ndim))
            f.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            f.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"weight file truncated while reading {what}")
    return data


def load_weights(path, arch: Architecture | None = None) -> LMNetParams:
    """Read a weight file and validate it against the architecture.

    Raises FormatError on a bad magic, unsupported version, truncation,
    or any tensor whose name/shape does not match the architecture.
    """
    arch = arch or canonical_architecture()
    expected = {}
    for layer in arch.all_layers():
        expected[f"{layer.name}.weight"] = layer.spec.weight_shape()
        expected[f"{layer.name}.bias"] = (layer.spec.out_channels,)

    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != WEIGHTS_MAGIC:
            raise FormatError("bad magic: not a weight file")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != WEIGHTS_VERSION:
            raise FormatError(f"unsupported weight file version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode()
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
            if name not in expected:
                raise FormatError(f"unexpected tensor {name!r} in weight file")
            if tuple(dims) != expected[name]:
                raise FormatError(
                    f"shape mismatch for {name}: file has {tuple(dims)}, "
                    f"architecture wants {expected[name]}"
                )
            n = int(np.prod(dims)) if dims else 1
            raw = _read_exact(f, 4 * n, f"data of {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        if f.read(1):
            raise FormatError("trailing bytes after last tensor")
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise FormatError(f"weight file missing tensors: {', '.join(missing)}")
    return LMNetParams(arch, tensors)
