"""The RiFCN network: forward feature stream, recurrent top-down fusion,
pixel-wise classification head, loss, and the hand-written backward pass.

Parameters live in a flat, ordered ``dict[str, ndarray]`` so optimizers and
serialization treat them uniformly. Names:

* ``block{b}.conv{j}.w`` / ``.b``  forward-stream convolutions
* ``fuse{l}.fwd.w`` / ``.b``       3x3 convolution applied to F_fwd^l
* ``fuse{l}.bwd.w`` / ``.b``       4x4 stride-2 deconvolution applied to F_bwd^{l+1}
* ``head.w`` / ``head.b``           1x1 classifier
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import ntr
from .tensor_ops import (
    ConvKernel,
    ShapeError,
    activation,
    activation_backward,
    conv2d,
    conv2d_backward,
    deconv2d,
    deconv2d_backward,
    maxpool2d,
    maxpool2d_backward,
    softmax_channels,
)

IGNORE = 255
PROB_CLAMP = 1e-7
FORMAT_VERSION = 1
BASE_WIDTHS = (64, 128, 256, 512, 1024)
DECONV_K, DECONV_STRIDE, DECONV_PAD = 4, 2, 1


class StaleCacheError(RuntimeError):
    pass


class EmptySupervisionError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ForwardStreamSpec:
    levels: int
    block_widths: tuple[int, ...]
    in_channels: int
    convs_per_block: int = 2

    def __post_init__(self):
        if self.levels < 0:
            raise ValueError("levels must be >= 0")
        if len(self.block_widths) != self.levels + 1:
            raise ValueError(
                f"need {self.levels + 1} block widths, got {len(self.block_widths)}"
            )
        if min(self.block_widths) < 1 or self.in_channels < 1 or self.convs_per_block < 1:
            raise ValueError("widths, in_channels and convs_per_block must be >= 1")

    @classmethod
    def default(cls, in_channels: int, width_factor: float = 1.0, levels: int = 4):
        """Reference widths (64 doubling to 1024) scaled by ``width_factor``."""
        base = [64 * 2 ** l for l in range(levels + 1)]
        widths = tuple(max(1, int(round(w * width_factor))) for w in base)
        return cls(levels, widths, in_channels)


def _kernel(params, prefix, stride=1, padding=0, transposed=False) -> ConvKernel:
    return ConvKernel(params[prefix + ".w"], params[prefix + ".b"], stride, padding, transposed)


@dataclass
class RiFCNModel:
    spec: ForwardStreamSpec
    num_classes: int
    params: dict[str, np.ndarray]
    version: int = 0

    @property
    def head_kind(self) -> str:
        return "sigmoid" if self.num_classes == 1 else "softmax"

    @property
    def dtype(self):
        return self.params["head.w"].dtype

    @property
    def levels(self) -> int:
        return self.spec.levels

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def block_kernel(self, b: int, j: int) -> ConvKernel:
        return _kernel(self.params, f"block{b}.conv{j}", 1, 1)

    def fuse_fwd_kernel(self, l: int) -> ConvKernel:
        return _kernel(self.params, f"fuse{l}.fwd", 1, 1)

    def fuse_bwd_kernel(self, l: int) -> ConvKernel:
        return _kernel(self.params, f"fuse{l}.bwd", DECONV_STRIDE, DECONV_PAD, transposed=True)

    def head_kernel(self) -> ConvKernel:
        return _kernel(self.params, "head")

    def bump(self) -> None:
        """Mark parameters as modified; invalidates outstanding caches."""
        self.version += 1

    def copy(self) -> "RiFCNModel":
        return RiFCNModel(self.spec, self.num_classes,
                          {k: v.copy() for k, v in self.params.items()})


def parameter_shapes(spec: ForwardStreamSpec, num_classes: int) -> dict[str, tuple]:
    shapes = {}
    w = spec.block_widths
    for b in range(spec.levels + 1):
        cin = spec.in_channels if b == 0 else w[b - 1]
        for j in range(spec.convs_per_block):
            shapes[f"block{b}.conv{j}.w"] = (w[b], cin if j == 0 else w[b], 3, 3)
            shapes[f"block{b}.conv{j}.b"] = (w[b],)
    for l in range(spec.levels):
        shapes[f"fuse{l}.fwd.w"] = (w[l], w[l], 3, 3)
        shapes[f"fuse{l}.fwd.b"] = (w[l],)
        # transposed kernel: input channels first
        shapes[f"fuse{l}.bwd.w"] = (w[l + 1], w[l], DECONV_K, DECONV_K)
        shapes[f"fuse{l}.bwd.b"] = (w[l],)
    shapes["head.w"] = (num_classes, w[0], 1, 1)
    shapes["head.b"] = (num_classes,)
    return shapes


def build_model(spec: ForwardStreamSpec, num_classes: int, seed: int = 0,
                dtype=np.float32) -> RiFCNModel:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(spec, num_classes).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        receptive = shape[2] * shape[3]
        limit = np.sqrt(6.0 / (shape[0] * receptive + shape[1] * receptive))
        params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return RiFCNModel(spec, num_classes, params)


@dataclass
class ActivationCache:
    """Intermediates of one forward pass, consumed by exactly one :func:`backprop`."""

    model_version: int = -1
    model_id: int = 0
    x_shape: tuple = ()
    block_inputs: dict = field(default_factory=dict)   # (b, j) -> conv input
    block_preacts: dict = field(default_factory=dict)  # (b, j) -> conv output before ReLU
    pools: dict = field(default_factory=dict)          # b -> (argmax, in_shape)
    fwd: list = field(default_factory=list)
    bwd: list = field(default_factory=list)
    fuse_fwd_pre: dict = field(default_factory=dict)
    fuse_bwd_pre: dict = field(default_factory=dict)
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None
    consumed: bool = False

    def bind(self, model: RiFCNModel):
        if self.model_version >= 0:
            raise StaleCacheError("cache already holds a forward pass; use a fresh cache")
        self.model_version = model.version
        self.model_id = id(model)


def _check_input(model: RiFCNModel, x: np.ndarray):
    if x.ndim != 4:
        raise ShapeError(f"input must be (n, c, h, w), got {x.shape}")
    if x.shape[1] != model.spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, model expects {model.spec.in_channels}")
    div = 2 ** model.levels
    if x.shape[2] % div or x.shape[3] % div:
        raise ShapeError(f"input spatial dims {x.shape[2:]} not divisible by {div}")


def forward_stream(model: RiFCNModel, x: np.ndarray, cache: ActivationCache | None = None):
    """Run the convolutional blocks; return the L+1 level features F_fwd^l."""
    _check_input(model, x)
    if cache is not None:
        cache.bind(model)
        cache.x_shape = x.shape
    fwd = []
    h = x.astype(model.dtype, copy=False)
    for b in range(model.levels + 1):
        if b > 0:
            h, idx = maxpool2d(fwd[-1])
            if cache is not None:
                cache.pools[b] = (idx, fwd[-1].shape)
        for j in range(model.spec.convs_per_block):
            pre = conv2d(h, model.block_kernel(b, j))
            if cache is not None:
                cache.block_inputs[b, j] = h
                cache.block_preacts[b, j] = pre
            h = activation("relu", pre)
        fwd.append(h)
    if cache is not None:
        cache.fwd = fwd
    return fwd


def backward_stream_fuse(model: RiFCNModel, fwd: list, cache: ActivationCache | None = None):
    """Top-down recurrence producing the full-resolution fused feature F_bwd^0.

    bwd[L] = fwd[L]; bwd[l] = relu(conv(fwd[l])) + relu(deconv(bwd[l+1])).
    """
    L = model.levels
    if len(fwd) != L + 1:
        raise ShapeError(f"expected {L + 1} pyramid levels, got {len(fwd)}")
    bwd = [None] * (L + 1)
    bwd[L] = fwd[L]
    for l in range(L - 1, -1, -1):
        a_pre = conv2d(fwd[l], model.fuse_fwd_kernel(l))
        b_pre = deconv2d(bwd[l + 1], model.fuse_bwd_kernel(l))
        if a_pre.shape != b_pre.shape:
            raise ShapeError(f"level {l}: fusion shapes {a_pre.shape} vs {b_pre.shape}")
        bwd[l] = activation("relu", a_pre) + activation("relu", b_pre)
        if cache is not None:
            cache.fuse_fwd_pre[l] = a_pre
            cache.fuse_bwd_pre[l] = b_pre
    if cache is not None:
        cache.bwd = bwd
    return bwd[0]


def _head_probs(model: RiFCNModel, logits: np.ndarray) -> np.ndarray:
    if model.head_kind == "sigmoid":
        return activation("sigmoid", logits)
    return softmax_channels(logits)


def forward(model: RiFCNModel, x: np.ndarray):
    """Forward pass with caching; returns ``(probs, cache)`` for training."""
    cache = ActivationCache()
    fwd = forward_stream(model, x, cache)
    fused = backward_stream_fuse(model, fwd, cache)
    cache.logits = conv2d(fused, model.head_kernel())
    cache.probs = _head_probs(model, cache.logits)
    return cache.probs, cache


def predict(model: RiFCNModel, x: np.ndarray) -> np.ndarray:
    """Class probabilities of shape (n, M, h, w)."""
    fused = backward_stream_fuse(model, forward_stream(model, x))
    return _head_probs(model, conv2d(fused, model.head_kernel()))


def probs_to_labels(probs: np.ndarray) -> np.ndarray:
    """Hard labels (n, h, w); a single sigmoid channel thresholds at 0.5."""
    if probs.shape[1] == 1:
        return (probs[:, 0] > 0.5).astype(np.int64)
    return probs.argmax(axis=1)


def _validate_labels(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    if labels.ndim == 2:
        labels = labels[None]
    if labels.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ShapeError(f"labels {labels.shape} do not match probabilities {probs.shape}")
    n_valid = max(probs.shape[1], 2)
    bad = (labels != IGNORE) & ((labels < 0) | (labels >= n_valid))
    if bad.any():
        raise ValueError(f"label value out of range: {labels[bad].flat[0]}")
    if not (labels != IGNORE).any():
        raise EmptySupervisionError("empty supervision: every pixel is IGNORE")
    return labels


def compute_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood over supervised pixels.

    One channel means a sigmoid head scored with binary cross-entropy on
    labels {0, 1}. Probabilities are clamped to [1e-7, 1 - 1e-7].
    """
    labels = _validate_labels(probs, labels)
    mask = labels != IGNORE
    p = np.clip(probs.astype(np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    if probs.shape[1] == 1:
        y = labels[mask]
        q = p[:, 0][mask]
        nll = -np.where(y == 1, np.log(q), np.log1p(-q))
    else:
        lab = np.where(mask, labels, 0)
        py = np.take_along_axis(p, lab[:, None], axis=1)[:, 0]
        nll = -np.log(py[mask])
    return float(nll.sum() / mask.sum())


def loss_grad_logits(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d loss / d logits, consistent with the clamp in :func:`compute_loss`."""
    labels = _validate_labels(probs, labels)
    mask = labels != IGNORE
    count = mask.sum()
    inside = lambda q: (q > PROB_CLAMP) & (q < 1 - PROB_CLAMP)  # noqa: E731
    if probs.shape[1] == 1:
        p = probs[:, 0]
        live = mask & inside(p)
        g = np.where(live, p - (labels == 1), 0) / count
        return g[:, None].astype(probs.dtype)
    lab = np.where(mask, labels, 0)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, lab[:, None], 1, axis=1)
    py = np.take_along_axis(probs, lab[:, None], axis=1)[:, 0]
    live = mask & inside(py)
    g = (probs - onehot) * live[:, None] / count
    return g.astype(probs.dtype)


def backprop(model: RiFCNModel, cache: ActivationCache, probs: np.ndarray,
             labels: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradient of :func:`compute_loss` w.r.t. every parameter."""
    if cache.consumed or cache.model_version != model.version or cache.model_id != id(model):
        raise StaleCacheError("stale activation cache: forward pass must precede each backprop")
    cache.consumed = True
    L = model.levels
    grads = {}

    def store(prefix, gw, gb):
        if prefix + ".w" in grads:
            grads[prefix + ".w"] += gw
            grads[prefix + ".b"] += gb
        else:
            grads[prefix + ".w"], grads[prefix + ".b"] = gw, gb

    d_logits = loss_grad_logits(probs, labels)
    d_bwd0, gw, gb = conv2d_backward(cache.bwd[0], model.head_kernel(), d_logits)
    store("head", gw, gb)

    d_fwd = [np.zeros_like(f) for f in cache.fwd]
    d_bwd = d_bwd0
    for l in range(L):
        g_a = activation_backward("relu", cache.fuse_fwd_pre[l], d_bwd)
        dx, gw, gb = conv2d_backward(cache.fwd[l], model.fuse_fwd_kernel(l), g_a)
        d_fwd[l] += dx
        store(f"fuse{l}.fwd", gw, gb)
        g_b = activation_backward("relu", cache.fuse_bwd_pre[l], d_bwd)
        d_bwd, gw, gb = deconv2d_backward(cache.bwd[l + 1], model.fuse_bwd_kernel(l), g_b)
        store(f"fuse{l}.bwd", gw, gb)
    # bwd[L] is fwd[L]
    d_fwd[L] += d_bwd

    carry = None
    for b in range(L, -1, -1):
        g = d_fwd[b] if carry is None else d_fwd[b] + carry
        for j in range(model.spec.convs_per_block - 1, -1, -1):
            g = activation_backward("relu", cache.block_preacts[b, j], g)
            g, gw, gb = conv2d_backward(cache.block_inputs[b, j], model.block_kernel(b, j), g)
            store(f"block{b}.conv{j}", gw, gb)
        if b > 0:
            idx, in_shape = cache.pools[b]
            carry = maxpool2d_backward(idx, g, in_shape)
    return {name: grads[name].astype(model.dtype, copy=False) for name in model.params}


def _manifest(model: RiFCNModel) -> str:
    s = model.spec
    lines = [
        f"format_version={FORMAT_VERSION}",
        f"levels={s.levels}",
        f"widths={','.join(map(str, s.block_widths))}",
        f"in_channels={s.in_channels}",
        f"convs_per_block={s.convs_per_block}",
        f"num_classes={model.num_classes}",
        f"head_kind={model.head_kind}",
    ]
    return "\n".join(lines) + "\n"


def model_to_bytes(model: RiFCNModel) -> bytes:
    manifest = np.frombuffer(_manifest(model).encode("ascii"), dtype=np.uint8)
    records = {"manifest": manifest}
    records.update(model.params)
    return ntr.encode_records(records)


def model_from_bytes(data: bytes) -> RiFCNModel:
    try:
        records = ntr.decode_records(data)
    except ntr.NTRError as exc:
        raise CheckpointError(str(exc)) from None
    if "manifest" not in records:
        raise CheckpointError("checkpoint has no manifest")
    meta = dict(
        line.split("=", 1)
        for line in records.pop("manifest").tobytes().decode("ascii").splitlines()
        if line
    )
    if meta.get("format_version") != str(FORMAT_VERSION):
        raise CheckpointError(f"version mismatch: {meta.get('format_version')!r}")
    spec = ForwardStreamSpec(
        levels=int(meta["levels"]),
        block_widths=tuple(int(v) for v in meta["widths"].split(",")),
        in_channels=int(meta["in_channels"]),
        convs_per_block=int(meta.get("convs_per_block", 2)),
    )
    num_classes = int(meta["num_classes"])
    shapes = parameter_shapes(spec, num_classes)
    if list(shapes) != list(records):
        raise CheckpointError("checkpoint parameters do not match manifest")
    for name, shape in shapes.items():
        if records[name].shape != shape:
            raise CheckpointError(f"{name}: shape {records[name].shape} != {shape}")
    model = RiFCNModel(spec, num_classes, records)
    if model.head_kind != meta.get("head_kind"):
        raise CheckpointError("head_kind inconsistent with num_classes")
    return model


def serialize_model(model: RiFCNModel, path) -> None:
    ntr.atomic_write(path, model_to_bytes(model))


def deserialize_model(path) -> RiFCNModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def iter_parameter_groups(model: RiFCNModel):
    """Group parameter names by layer prefix, e.g. ``fuse0.bwd``."""
    key = lambda name: name.rsplit(".", 1)[0]  # noqa: E731
    for prefix, names in itertools.groupby(model.params, key=key):
        yield prefix, list(names)
