"""Weight-shared convolutional network in plain numpy.

One maximal-width tensor is stored per layer.  A configuration selects a
sub-network by cropping: the first ``c_out`` output slices of each layer and
the first ``c_in`` input slices, where ``c_in`` is the width of the layer
feeding it.  Dropped blocks are skipped and the input resolution is set by
area-averaging the images.  Training a configuration only touches the
cropped slices.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import cost as costs
from .estimator import EvaluatedSample, GaussianPolicy
from .rng import Stream
from .space import (
    ArchitectureConfig,
    ArchitectureSpace,
    LayerSpec,
    check_config,
    clamp,
    layer_inputs,
    round_to_config,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"JPWS"
CHECKPOINT_VERSION = 1


class NumericalFault(FloatingPointError):
    def __init__(self, layer: int, what: str = "activations"):
        self.layer = layer
        super().__init__(f"non-finite {what} at layer {layer}")


def desk_space(
    num_classes: int = 10,
    widths: Sequence[int] = (24, 24, 24, 24),
    spatial_max: int = 16,
    input_channels: int = 3,
) -> ArchitectureSpace:
    """The four-block test backbone.

    Block 0 is a stride-2 conv and always kept; blocks 1-3 are stride-1 convs
    dropped from the end, so the classifier simply crops its input to the
    width of the last kept block.  The last two convs form a tie group
    (a stand-in for an identity shortcut).  A dense classifier of fixed
    width follows global average pooling.
    """
    layers = [LayerSpec("conv", widths[0], stride=2, block_id=0)]
    layers += [LayerSpec("conv", w, stride=1, block_id=b) for b, w in enumerate(widths[1:], start=1)]
    layers.append(
        LayerSpec("dense", num_classes, min_out_channels=num_classes, has_relu=False, block_id=len(widths))
    )
    return ArchitectureSpace(
        layers=tuple(layers),
        input_channels=input_channels,
        spatial_max=spatial_max,
        tie_groups=((len(widths) - 2, len(widths) - 1),),
        droppable_blocks=tuple(range(1, len(widths))),
    )


# --- data ------------------------------------------------------------------


@dataclass
class Batch:
    inputs: np.ndarray  # (batch, channels, s, s)
    labels: np.ndarray
    _resized: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx])

    def at(self, spatial: int) -> "Batch":
        """Downsampled copy, cached per resolution."""
        if spatial not in self._resized:
            self._resized[spatial] = downsample(self, spatial)
        return self._resized[spatial]


def _area_matrix(src: int, dst: int) -> np.ndarray:
    """Row i averages source cells overlapping [i*src/dst, (i+1)*src/dst)."""
    A = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(src, int(np.ceil(hi)))):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                A[i, j] = overlap / scale
    return A


def downsample(batch: Batch, spatial: int) -> Batch:
    if spatial < 1:
        raise ValueError("spatial must be >= 1")
    size = batch.inputs.shape[-1]
    if spatial > size:
        raise ValueError(f"cannot upsample {size} -> {spatial}")
    if spatial == size:
        return Batch(batch.inputs, batch.labels)
    A = _area_matrix(size, spatial)
    x = np.einsum("ih,bchw,jw->bcij", A, batch.inputs, A, optimize=True)
    return Batch(x, batch.labels)


def make_dataset(num_classes: int = 10, samples_per_class: int = 100, s_max: int = 16, seed: int = 0,
                 channels: int = 3, val_fraction: float = 0.2, noise: float = 1.0,
                 max_attempts: int = 5) -> tuple[Batch, Batch]:
    """Synthetic image classification data: class-specific smooth patterns plus noise.

    Each class owns a few low-frequency sinusoids per channel; samples jitter
    their phase and amplitude, add a random smooth nuisance field and white
    noise.  The split is checked with a nearest-centroid probe at 1/4
    resolution (>= 80% validation accuracy) and regenerated otherwise.
    """
    if min(num_classes, samples_per_class, s_max, channels) < 1:
        raise ValueError("all counts must be >= 1")
    for attempt in range(max_attempts):
        train, val = _generate(num_classes, samples_per_class, s_max, seed, attempt, channels,
                               val_fraction, noise)
        acc = nearest_centroid_accuracy(train, val, num_classes, max(1, s_max // 4))
        if acc >= 0.8:
            return train, val
        log.info("dataset attempt %d: probe accuracy %.3f < 0.8, regenerating", attempt, acc)
    raise RuntimeError(f"synthetic data not separable after {max_attempts} attempts")


def _generate(num_classes, samples_per_class, s_max, seed, attempt, channels, val_fraction, noise):
    rng = Stream(np.random.SeedSequence([seed, attempt]))
    grid = (np.arange(s_max) + 0.5) / s_max
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    n_waves = 2
    freqs = rng.integers(0, 3, size=(num_classes, channels, n_waves, 2)).astype(float)
    freqs[..., 0] += 0.5
    phases = rng.uniform(0, 2 * np.pi, size=(num_classes, channels, n_waves))

    n = num_classes * samples_per_class
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    jitter = rng.normal((n, channels, n_waves), scale=0.3)
    amp = 1.0 + rng.normal((n, 1, 1, 1), scale=0.2)
    arg = 2 * np.pi * (freqs[labels][..., 0, None, None] * xx + freqs[labels][..., 1, None, None] * yy)
    waves = np.sin(arg + (phases[labels] + jitter)[..., None, None]).sum(axis=2)

    nf = rng.integers(1, 3, size=(n, channels, 2)).astype(float)
    nphase = rng.uniform(0, 2 * np.pi, size=(n, channels))
    nuisance = 0.5 * np.sin(2 * np.pi * (nf[..., 0, None, None] * xx + nf[..., 1, None, None] * yy)
                            + nphase[..., None, None])
    x = amp * waves + nuisance + rng.normal((n, channels, s_max, s_max), scale=noise)

    order = rng.permutation(n)
    x, labels = x[order], labels[order]
    val_mask = np.zeros(n, dtype=bool)
    for k in range(num_classes):
        idx = np.flatnonzero(labels == k)
        val_mask[idx[: max(1, int(round(val_fraction * len(idx))))]] = True
    return Batch(x[~val_mask], labels[~val_mask]), Batch(x[val_mask], labels[val_mask])


def nearest_centroid_accuracy(train: Batch, val: Batch, num_classes: int, spatial: int) -> float:
    tr, va = downsample(train, spatial), downsample(val, spatial)
    ftr = tr.inputs.reshape(len(tr), -1)
    fva = va.inputs.reshape(len(va), -1)
    centroids = np.stack([ftr[tr.labels == k].mean(axis=0) for k in range(num_classes)])
    d = ((fva[:, None, :] - centroids[None]) ** 2).sum(-1)
    return float((d.argmin(1) == va.labels).mean())


# --- weight store ----------------------------------------------------------


def _possible_sources(space: ArchitectureSpace, i: int) -> list[Optional[int]]:
    droppable = set(space.droppable_blocks)
    out: list[Optional[int]] = []
    for j in range(i - 1, -1, -1):
        out.append(j)
        if space.layers[j].block_id not in droppable:
            return out
    out.append(None)
    return out


def max_in_channels(space: ArchitectureSpace, i: int) -> int:
    return max(
        space.input_channels if j is None else space.layers[j].max_out_channels
        for j in _possible_sources(space, i)
    )


def _weight_shape(layer: LayerSpec, c_in: int) -> tuple[int, ...]:
    if layer.kind == "dense":
        return (layer.max_out_channels, c_in)
    if layer.kind == "depthwise_conv":
        return (layer.max_out_channels, 1, layer.kernel, layer.kernel)
    return (layer.max_out_channels, c_in, layer.kernel, layer.kernel)


class SharedWeightStore:
    """Maximal-shape weights, biases and their momentum buffers."""

    def __init__(self, space: ArchitectureSpace, weights, biases, mom_weights=None, mom_biases=None):
        self.space = space
        self.weights = [np.ascontiguousarray(w, dtype=float) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=float) for b in biases]
        self.mom_weights = [np.zeros_like(w) for w in self.weights] if mom_weights is None else \
            [np.ascontiguousarray(m, dtype=float) for m in mom_weights]
        self.mom_biases = [np.zeros_like(b) for b in self.biases] if mom_biases is None else \
            [np.ascontiguousarray(m, dtype=float) for m in mom_biases]
        for i, layer in enumerate(space.layers):
            expect = _weight_shape(layer, max_in_channels(space, i))
            if self.weights[i].shape != expect or self.mom_weights[i].shape != expect:
                raise ValueError(f"layer {i}: weight shape {self.weights[i].shape} != {expect}")
            if self.biases[i].shape != (layer.max_out_channels,) or self.mom_biases[i].shape != self.biases[i].shape:
                raise ValueError(f"layer {i}: bias shape mismatch")

    @classmethod
    def initialize(cls, space: ArchitectureSpace, seed) -> "SharedWeightStore":
        rng = seed if isinstance(seed, Stream) else Stream(seed)
        weights, biases = [], []
        for i, layer in enumerate(space.layers):
            shape = _weight_shape(layer, max_in_channels(space, i))
            bound = np.sqrt(1.0 / np.prod(shape[1:]))
            weights.append(rng.uniform(-bound, bound, size=shape))
            biases.append(np.zeros(layer.max_out_channels))
        return cls(space, weights, biases)

    def copy(self) -> "SharedWeightStore":
        return SharedWeightStore(self.space, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                                 [m.copy() for m in self.mom_weights], [m.copy() for m in self.mom_biases])

    def tensors(self) -> list[np.ndarray]:
        out = []
        for i in range(len(self.weights)):
            out += [self.weights[i], self.biases[i], self.mom_weights[i], self.mom_biases[i]]
        return out

    def save(self, path: str) -> None:
        """Write the binary checkpoint.

        Layout (little-endian): 4-byte magic ``JPWS``, uint32 version, uint32
        layer count; then per layer four tensors (weight, bias, weight
        momentum, bias momentum), each as uint32 ndim, ndim x uint32 dims,
        and a row-major float64 payload.
        """
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(self.weights)))
            for t in self.tensors():
                fh.write(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
                fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str, space: ArchitectureSpace) -> "SharedWeightStore":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a weight-store checkpoint")
        version, n_layers = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        if n_layers != space.num_layers:
            raise ValueError(f"{path}: checkpoint has {n_layers} layers, space has {space.num_layers}")
        pos, tensors = 12, []
        for _ in range(4 * n_layers):
            (ndim,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape)) * 8
            tensors.append(np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy())
            pos += size
        if pos != len(data):
            raise ValueError(f"{path}: trailing bytes in checkpoint")
        return cls(space, tensors[0::4], tensors[1::4], tensors[2::4], tensors[3::4])


@dataclass
class LayerView:
    index: int
    layer: LayerSpec
    weight: np.ndarray
    bias: np.ndarray
    mom_weight: np.ndarray
    mom_bias: np.ndarray


@dataclass
class WeightView:
    config: ArchitectureConfig
    layers: list[LayerView]


def crop_view(store: SharedWeightStore, config: ArchitectureConfig) -> WeightView:
    """Slices of the store used by ``config``; writes through them hit the store."""
    space = store.space
    check_config(config, space)
    views = []
    for i, src in layer_inputs(config, space).items():
        layer = space.layers[i]
        c_in = space.input_channels if src is None else config.out_channels[src]
        c_out = config.out_channels[i]
        if layer.kind == "depthwise_conv":
            if c_in != c_out:
                raise ValueError(f"depthwise layer {i} needs in == out channels")
            sl = (slice(0, c_out),)
        else:
            sl = (slice(0, c_out), slice(0, c_in))
        views.append(LayerView(i, layer, store.weights[i][sl], store.biases[i][:c_out],
                               store.mom_weights[i][sl], store.mom_biases[i][:c_out]))
    return WeightView(config, views)


# --- forward / backward ----------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int):
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win  # (B, C, Ho, Wo, k, k)


def _conv_forward(x, w, b, stride):
    k = w.shape[-1]
    win = _im2col(x, k, stride)
    B, C, Ho, Wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(B, Ho, Wo, -1).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, x_shape, cols, w, stride):
    B, C, H, W = x_shape
    O, k = w.shape[0], w.shape[-1]
    p = (k - 1) // 2
    Ho, Wo = dout.shape[2:]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, O)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(O, -1)).reshape(B, Ho, Wo, C, k, k)
    dxp = np.zeros((B, C, H + 2 * p, W + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += \
                dcols[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p : p + H, p : p + W], dw, db


def _dw_forward(x, w, b, stride):
    win = _im2col(x, w.shape[-1], stride)
    out = np.einsum("bchwij,cij->bchw", win, w[:, 0]) + b[None, :, None, None]
    return out, win


def _dw_backward(dout, x_shape, win, w, stride):
    B, C, H, W = x_shape
    k = w.shape[-1]
    p = (k - 1) // 2
    Ho, Wo = dout.shape[2:]
    dw = np.einsum("bchw,bchwij->cij", dout, win)[:, None]
    db = dout.sum(axis=(0, 2, 3))
    dxp = np.zeros((B, C, H + 2 * p, W + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dout * w[None, :, 0, i, j, None, None]
    return dxp[:, :, p : p + H, p : p + W], dw, db


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and d(loss)/d(logits); rows are max-shifted before exp."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    n = len(labels)
    loss = float((logsumexp - z[np.arange(n), labels]).mean())
    probs = np.exp(z - logsumexp[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


@dataclass
class ForwardResult:
    logits: np.ndarray
    loss: float
    cache: list = field(default_factory=list, repr=False)


def forward(view: WeightView, batch: Batch, keep_cache: bool = False) -> ForwardResult:
    """Run the cropped network on ``batch`` (already at ``view.config.spatial``)."""
    if batch.inputs.shape[-1] != view.config.spatial:
        raise ValueError(f"batch resolution {batch.inputs.shape[-1]} != config spatial {view.config.spatial}")
    h = batch.inputs
    cache = []
    for lv in view.layers:
        layer = lv.layer
        pooled = False
        if layer.kind == "dense":
            if h.ndim == 4:
                x_shape = h.shape
                h = h.mean(axis=(2, 3))
                pooled = x_shape
            x_in = h
            out = h @ lv.weight.T + lv.bias
            aux = None
        elif layer.kind == "conv":
            x_in = h
            out, aux = _conv_forward(h, lv.weight, lv.bias, layer.stride)
        else:
            x_in = h
            out, aux = _dw_forward(h, lv.weight, lv.bias, layer.stride)
        if layer.has_relu:
            out = np.maximum(out, 0.0)
        if not np.all(np.isfinite(out)):
            raise NumericalFault(lv.index)
        if keep_cache:
            cache.append((x_in, aux, out, pooled))
        h = out
    if h.ndim == 4:
        h = h.mean(axis=(2, 3))
    loss, _ = softmax_cross_entropy(h, batch.labels)
    return ForwardResult(h, loss, cache)


def gradients(view: WeightView, batch: Batch) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Loss and per-active-layer ``(dW, db)`` for the cropped network."""
    res = forward(view, batch, keep_cache=True)
    _, dh = softmax_cross_entropy(res.logits, batch.labels)
    grads: list = [None] * len(view.layers)
    last_out = res.cache[-1][2]
    if last_out.ndim == 4:
        dh = np.broadcast_to(dh[:, :, None, None], last_out.shape) / (last_out.shape[2] * last_out.shape[3])
    for pos in range(len(view.layers) - 1, -1, -1):
        lv = view.layers[pos]
        x_in, aux, out, pooled = res.cache[pos]
        if lv.layer.has_relu:
            dh = dh * (out > 0)
        if lv.layer.kind == "dense":
            dw, db = dh.T @ x_in, dh.sum(axis=0)
            dh = dh @ lv.weight
            if pooled:
                B, C, H, W = pooled
                dh = np.broadcast_to(dh[:, :, None, None], pooled) / (H * W)
        elif lv.layer.kind == "conv":
            dh, dw, db = _conv_backward(dh, x_in.shape, aux, lv.weight, lv.layer.stride)
        else:
            dh, dw, db = _dw_backward(dh, x_in.shape, aux, lv.weight, lv.layer.stride)
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise NumericalFault(lv.index, "gradients")
        grads[pos] = (dw, db)
    return res.loss, grads


def backward_and_step(view: WeightView, batch: Batch, lr: float = 0.01, momentum: float = 0.9,
                      weight_decay: float = 1e-5) -> float:
    """One SGD-with-momentum step on the cropped slices; returns the batch loss.

    ``buf = momentum * buf + (grad + weight_decay * param); param -= lr * buf``
    """
    loss, grads = gradients(view, batch)
    for lv, (dw, db) in zip(view.layers, grads):
        for param, buf, g in ((lv.weight, lv.mom_weight, dw), (lv.bias, lv.mom_bias, db)):
            buf *= momentum
            buf += g + weight_decay * param
            param -= lr * buf
    return loss


# --- training / evaluation -------------------------------------------------


@dataclass(frozen=True)
class TrainSettings:
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5


def train_inner(store: SharedWeightStore, policy: GaussianPolicy, data: Batch, iterations: int,
                seed, settings: TrainSettings = TrainSettings()) -> list[float]:
    """Train the shared weights under configurations sampled from ``policy``.

    Each iteration samples ``v ~ N(mu, sigma)``, clamps and rounds it, and
    takes one SGD step on a random batch at that configuration.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = seed if isinstance(seed, Stream) else Stream(seed)
    space = store.space
    n = len(data)
    bs = min(settings.batch_size, n)
    losses = []
    for _ in range(iterations):
        v = policy.mu + rng.normal(space.dim) * np.asarray(policy.sigma)
        config = round_to_config(clamp(v, space), space)
        idx = np.sort(rng.permutation(n)[:bs])
        batch = data.at(config.spatial).subset(idx)
        losses.append(backward_and_step(crop_view(store, config), batch, settings.lr,
                                        settings.momentum, settings.weight_decay))
    return losses


def train_config(store: SharedWeightStore, config: ArchitectureConfig, data: Batch, iterations: int,
                 seed, settings: TrainSettings = TrainSettings()) -> list[float]:
    """Fine-tune one fixed configuration."""
    rng = seed if isinstance(seed, Stream) else Stream(seed)
    view = crop_view(store, config)
    n = len(data)
    bs = min(settings.batch_size, n)
    resized = data.at(config.spatial)
    return [
        backward_and_step(view, resized.subset(np.sort(rng.permutation(n)[:bs])), settings.lr,
                          settings.momentum, settings.weight_decay)
        for _ in range(iterations)
    ]


def evaluate_config(store: SharedWeightStore, config: ArchitectureConfig, data: Batch) -> tuple[float, float]:
    """Mean loss and accuracy of ``config`` on ``data``."""
    res = forward(crop_view(store, config), data.at(config.spatial))
    return res.loss, float((res.logits.argmax(axis=1) == data.labels).mean())


def evaluate_error(store: SharedWeightStore, v, valset: Batch, constraint: costs.ConstraintSpec,
                   table: Optional[costs.LatencyTable] = None, noise=None) -> EvaluatedSample:
    """Penalized validation error at pruning vector ``v``."""
    if len(valset) == 0:
        raise ValueError("empty validation set")
    space = store.space
    config = round_to_config(clamp(v, space), space)
    loss, _ = evaluate_config(store, config, valset)
    c = costs.cost(config, space, constraint.metric, table)
    sample = EvaluatedSample(costs.penalized_error(loss, c, constraint), loss, c)
    if noise is not None:
        sample.noise = np.asarray(noise, dtype=float)
    return sample
