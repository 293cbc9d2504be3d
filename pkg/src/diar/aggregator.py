"""Sequence-to-image reconstruction models.

Two architectures share the same convolutional encoder/decoder:

* Deep Sets baseline: decode(mean_i encode(frame_i)).
* Windowed-attention model: per-frame encodings are stacked along time and
  passed through two window-attention blocks (regular then shifted windows
  over (p, m, m) spatio-temporal token groups); an aggregation rule collapses
  the time axis before decoding.

No positional encoding is used inside attention, so with a temporal window
covering the whole sequence the model is invariant to frame permutation.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .imaging import Image
from .tensor import ParamStore, Tensor

MASK_BIAS = -1e9

AGGREGATION_MODES = ("avg_x", "avg_e", "softmax_weighted")

ENC_CHANNELS = [16, 32, 64]  # stem, block1, block2 outputs


@dataclass
class WindowSpec:
    p: int  # temporal extent
    m: int  # spatial extent
    shifted: bool = False

    def __post_init__(self):
        if self.p < 1 or self.m < 1:
            raise ValueError("window extents must be >= 1")


@dataclass
class DiarModel:
    params: ParamStore
    mode: str = "softmax_weighted"
    window_p: int = 2
    window_m: int = 7
    n_heads: int = 4
    c_lat: int = 64
    mlp_expansion: int = 2
    dtype: type = np.float64
    kind: str = "diar"  # "diar" or "deep_sets"


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _add_conv(store, rng, name, c_out, c_in, k, dtype):
    store.add(f"{name}.w", _he_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype))
    store.add(f"{name}.b", np.zeros(c_out, dtype=dtype))


def _add_linear(store, rng, name, c_in, c_out, dtype):
    store.add(f"{name}.w", _he_uniform(rng, (c_in, c_out), c_in, dtype))
    store.add(f"{name}.b", np.zeros(c_out, dtype=dtype))


def build_model(kind: str = "diar", mode: str = "softmax_weighted", window_p: int = 2,
                window_m: int = 7, n_heads: int = 4, seed: int = 0,
                dtype=np.float64) -> DiarModel:
    """Seeded He-uniform initialization of all model parameters."""
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    if kind not in ("diar", "deep_sets"):
        raise ValueError(f"unknown model kind {kind!r}")
    c1, c2, c3 = ENC_CHANNELS
    if c3 % n_heads != 0:
        raise ValueError("latent channels must be divisible by n_heads")
    rng = np.random.default_rng(seed)
    store = ParamStore()
    _add_conv(store, rng, "enc.stem", c1, 3, 3, dtype)
    _add_conv(store, rng, "enc.b1.conv1", c2, c1, 3, dtype)
    _add_conv(store, rng, "enc.b1.conv2", c2, c2, 3, dtype)
    _add_conv(store, rng, "enc.b1.skip", c2, c1, 1, dtype)
    _add_conv(store, rng, "enc.b2.conv1", c3, c2, 3, dtype)
    _add_conv(store, rng, "enc.b2.conv2", c3, c3, 3, dtype)
    _add_conv(store, rng, "enc.b2.skip", c3, c2, 1, dtype)
    if kind == "diar":
        for i in range(2):
            pre = f"attn{i}"
            for nm in ("wq", "wk", "wv", "wo"):
                _add_linear(store, rng, f"{pre}.{nm}", c3, c3, dtype)
            _add_linear(store, rng, f"{pre}.mlp1", c3, 2 * c3, dtype)
            _add_linear(store, rng, f"{pre}.mlp2", 2 * c3, c3, dtype)
            for nm in ("ln1", "ln2"):
                store.add(f"{pre}.{nm}.g", np.ones(c3, dtype=dtype))
                store.add(f"{pre}.{nm}.b", np.zeros(c3, dtype=dtype))
    _add_conv(store, rng, "dec.b1.conv1", c2, c3, 3, dtype)
    _add_conv(store, rng, "dec.b1.conv2", c2, c2, 3, dtype)
    _add_conv(store, rng, "dec.b1.skip", c2, c3, 1, dtype)
    _add_conv(store, rng, "dec.b2.conv1", c1, c2, 3, dtype)
    _add_conv(store, rng, "dec.b2.conv2", c1, c1, 3, dtype)
    _add_conv(store, rng, "dec.b2.skip", c1, c2, 1, dtype)
    _add_conv(store, rng, "dec.out", 3, c1, 3, dtype)
    return DiarModel(store, mode=mode, window_p=window_p, window_m=window_m,
                     n_heads=n_heads, c_lat=c3, dtype=dtype, kind=kind)


# ---------------------------------------------------------------------------
# encoder / decoder


def _conv(store, name, x, stride=1, pad=1):
    return tt.conv2d(x, store[f"{name}.w"], store[f"{name}.b"], stride=stride, pad=pad)


def _encode(store, x: Tensor) -> Tensor:
    """(3, H, W) -> (C_lat, H/4, W/4); a leading batch axis passes through."""
    h = tt.relu(_conv(store, "enc.stem", x))
    for blk in ("enc.b1", "enc.b2"):
        skip = _conv(store, f"{blk}.skip", h, stride=2, pad=0)
        y = tt.relu(_conv(store, f"{blk}.conv1", h, stride=2, pad=1))
        y = _conv(store, f"{blk}.conv2", y, stride=1, pad=1)
        h = tt.relu(y + skip)
    return h


def _decode(store, x: Tensor) -> Tensor:
    """(C_lat, H/4, W/4) -> sigmoid-bounded (3, H, W)."""
    h = x
    for blk in ("dec.b1", "dec.b2"):
        up = tt.upsample2x(h)
        skip = _conv(store, f"{blk}.skip", up, stride=1, pad=0)
        y = tt.relu(_conv(store, f"{blk}.conv1", up, stride=1, pad=1))
        y = _conv(store, f"{blk}.conv2", y, stride=1, pad=1)
        h = tt.relu(y + skip)
    return tt.sigmoid(_conv(store, "dec.out", h, stride=1, pad=1))


def _frames_tensor(frames, dtype) -> Tensor:
    """All frames stacked as one (T, 3, H, W) tensor for batched encoding."""
    data = np.stack([f.data if isinstance(f, Image) else np.asarray(f)
                     for f in frames])
    return Tensor(np.ascontiguousarray(data.transpose(0, 3, 1, 2)).astype(dtype))


# ---------------------------------------------------------------------------
# window partitioning


@dataclass
class _Partition:
    windows: Tensor  # (nW, L, C)
    bias: np.ndarray  # (nW, 1, L, L) additive attention bias
    orig_shape: tuple
    padded_shape: tuple
    shifts: tuple
    window: tuple


def _dim_labels(size: int, win: int, shift: int) -> np.ndarray:
    """Swin region labels along one axis; constant when unshifted."""
    if shift == 0:
        return np.zeros(size, dtype=np.intp)
    labels = np.zeros(size, dtype=np.intp)
    labels[size - win :] = 1
    labels[size - shift :] = 2
    return labels


def window_partition(features: Tensor, w: WindowSpec):
    """Split (T, H, W, C) features into non-overlapping (p, m, m) token
    groups.  Extents are replicate-padded up to window multiples (pads are
    masked as attention keys); shifted windows cyclically roll the features
    by half the window extent and mask token pairs whose sources are not
    adjacent.  Returns a partition that ``window_unpartition`` inverts
    exactly."""
    t, hh, ww, c = features.shape
    p, m = w.p, w.m
    tp = -(-t // p) * p
    hp = -(-hh // m) * m
    wp = -(-ww // m) * m
    pads = ((0, tp - t), (0, hp - hh), (0, wp - ww), (0, 0))
    x = tt.replicate_pad(features, pads) if (tp, hp, wp) != (t, hh, ww) else features
    pad_flag = np.zeros((tp, hp, wp), dtype=bool)
    pad_flag[t:, :, :] = True
    pad_flag[:, hh:, :] = True
    pad_flag[:, :, ww:] = True

    # no shift along an axis the window fully covers
    st = p // 2 if (w.shifted and tp > p) else 0
    sh = m // 2 if (w.shifted and hp > m) else 0
    sw = m // 2 if (w.shifted and wp > m) else 0
    labels = (
        _dim_labels(tp, p, st)[:, None, None] * 9
        + _dim_labels(hp, m, sh)[None, :, None] * 3
        + _dim_labels(wp, m, sw)[None, None, :]
    )
    if st or sh or sw:
        x = tt.roll(x, (-st, -sh, -sw), axes=(0, 1, 2))
        labels = np.roll(labels, (-st, -sh, -sw), axis=(0, 1, 2))
        pad_flag = np.roll(pad_flag, (-st, -sh, -sw), axis=(0, 1, 2))

    nt, nh, nw = tp // p, hp // m, wp // m
    x = tt.reshape(x, (nt, p, nh, m, nw, m, c))
    x = tt.transpose(x, (0, 2, 4, 1, 3, 5, 6))
    windows = tt.reshape(x, (nt * nh * nw, p * m * m, c))

    lab = labels.reshape(nt, p, nh, m, nw, m).transpose(0, 2, 4, 1, 3, 5).reshape(-1, p * m * m)
    pad_w = pad_flag.reshape(nt, p, nh, m, nw, m).transpose(0, 2, 4, 1, 3, 5).reshape(-1, p * m * m)
    bias = np.where(lab[:, :, None] != lab[:, None, :], MASK_BIAS, 0.0)
    bias = bias + np.where(pad_w[:, None, :], MASK_BIAS, 0.0)
    # always allow self-attention so no softmax row is fully masked
    ii = np.arange(p * m * m)
    bias[:, ii, ii] = 0.0
    return _Partition(windows, bias[:, None, :, :].astype(features.dtype),
                      (t, hh, ww, c), (tp, hp, wp), (st, sh, sw), (p, m))


def window_unpartition(windows: Tensor, part: _Partition) -> Tensor:
    t, hh, ww, c = part.orig_shape
    tp, hp, wp = part.padded_shape
    p, m = part.window
    nt, nh, nw = tp // p, hp // m, wp // m
    x = tt.reshape(windows, (nt, nh, nw, p, m, m, c))
    x = tt.transpose(x, (0, 3, 1, 4, 2, 5, 6))
    x = tt.reshape(x, (tp, hp, wp, c))
    st, sh, sw = part.shifts
    if st or sh or sw:
        x = tt.roll(x, (st, sh, sw), axes=(0, 1, 2))
    if (tp, hp, wp) != (t, hh, ww):
        x = tt.crop(x, (slice(0, t), slice(0, hh), slice(0, ww), slice(None)))
    return x


def window_attention(windows: Tensor, store: ParamStore, prefix: str,
                     n_heads: int, bias: np.ndarray) -> Tensor:
    """Per-window multi-head self-attention followed by residual+layer-norm,
    a 2-layer MLP and another residual+layer-norm."""
    nw, length, c = windows.shape
    if c % n_heads != 0:
        raise ValueError("window_attention: channels not divisible by n_heads")
    dh = c // n_heads

    def linear(x, name):
        flat = tt.reshape(x, (nw * length, c) if x.shape[-1] == c else (nw * length, x.shape[-1]))
        y = tt.matmul(flat, store[f"{prefix}.{name}.w"]) + store[f"{prefix}.{name}.b"]
        return y

    def heads(x):
        y = tt.reshape(x, (nw, length, n_heads, dh))
        return tt.transpose(y, (0, 2, 1, 3))

    q = heads(linear(windows, "wq"))
    k = heads(linear(windows, "wk"))
    v = heads(linear(windows, "wv"))
    logits = tt.scale(tt.matmul(q, tt.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    logits = logits + Tensor(bias)
    attn = tt.softmax(logits, axis=-1)
    ctx = tt.matmul(attn, v)  # (nW, heads, L, dh)
    ctx = tt.reshape(tt.transpose(ctx, (0, 2, 1, 3)), (nw, length, c))
    out = tt.reshape(linear(ctx, "wo"), (nw, length, c))
    x = tt.layer_norm(windows + out, store[f"{prefix}.ln1.g"], store[f"{prefix}.ln1.b"])
    hdn = tt.relu(tt.reshape(linear(x, "mlp1"), (nw, length, 2 * c)))
    flat = tt.reshape(hdn, (nw * length, 2 * c))
    mlp = tt.reshape(tt.matmul(flat, store[f"{prefix}.mlp2.w"]) + store[f"{prefix}.mlp2.b"],
                     (nw, length, c))
    return tt.layer_norm(x + mlp, store[f"{prefix}.ln2.g"], store[f"{prefix}.ln2.b"])


def _attention_block(features: Tensor, store: ParamStore, prefix: str,
                     n_heads: int, w: WindowSpec) -> Tensor:
    part = window_partition(features, w)
    out = window_attention(part.windows, store, prefix, n_heads, part.bias)
    return window_unpartition(out, part)


# ---------------------------------------------------------------------------
# aggregation and full forward passes


def aggregate(x: Tensor, e: Tensor | None, mode: str) -> Tensor:
    """Collapse the time axis of (T, H, W, C) features into (H, W, C)."""
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    if mode == "avg_x":
        return tt.mean(x, axis=0)
    if e is None or e.shape != x.shape:
        raise tt.shape_error("aggregate", x.shape, None if e is None else e.shape)
    if mode == "avg_e":
        return tt.mean(e, axis=0)
    weights = tt.softmax(e, axis=0)
    return tt.reduce_sum(tt.mul(x, weights), axis=0)


def diar_forward(frames, model: DiarModel) -> Tensor:
    """Full reconstruction pass; returns the output as a (3, H, W) tensor
    (use ``to_image`` for an Image)."""
    if len(frames) < 1:
        raise ValueError("diar_forward needs at least one frame")
    store = model.params
    encoded = _encode(store, _frames_tensor(frames, model.dtype))
    x = tt.transpose(encoded, (0, 2, 3, 1))  # (T, h, w, C)
    if model.mode == "avg_x":
        e = None  # embeddings are ignored by this mode; skip the attention cost
    else:
        e = _attention_block(x, store, "attn0", model.n_heads,
                             WindowSpec(model.window_p, model.window_m, shifted=False))
        e = _attention_block(e, store, "attn1", model.n_heads,
                             WindowSpec(model.window_p, model.window_m, shifted=True))
    y = aggregate(x, e, model.mode)
    return _decode(store, tt.transpose(y, (2, 0, 1)))


def deep_sets_forward(frames, model: DiarModel) -> Tensor:
    """decode(mean_i encode(frame_i)); exactly permutation/duplication
    invariant."""
    if len(frames) < 1:
        raise ValueError("deep_sets_forward needs at least one frame")
    store = model.params
    encoded = _encode(store, _frames_tensor(frames, model.dtype))
    pooled = tt.mean(encoded, axis=0)
    return _decode(store, pooled)


def model_forward(frames, model: DiarModel) -> Tensor:
    if model.kind == "deep_sets":
        return deep_sets_forward(frames, model)
    return diar_forward(frames, model)


def to_image(out: Tensor) -> Image:
    return Image(np.asarray(out.data, dtype=np.float64).transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 4
    epochs: int = 10
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)  # dicts: epoch, train_loss, val_loss, wall_seconds
    best_epoch: int = -1
    best_val_loss: float = np.inf


def _l1_loss(out: Tensor, label: Image) -> Tensor:
    target = np.ascontiguousarray(label.data.transpose(2, 0, 1)).astype(out.dtype)
    diff = out - Tensor(target)
    # |d| as relu(d) + relu(-d): keeps the op set minimal
    return tt.mean(tt.relu(diff) + tt.relu(-diff))


def _sequence_loss(model: DiarModel, seq) -> Tensor:
    return _l1_loss(model_forward(seq.frames, model), seq.label)


def split_dataset(n: int, val_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n))) if n > 1 else 0
    return perm[n_val:], perm[:n_val]


def train(model: DiarModel, dataset, config: TrainConfig | None = None) -> TrainHistory:
    """Minimize mean-absolute reconstruction error against the labels.

    Deterministic for a fixed seed; records per-epoch train/val losses and
    restores the best-validation parameters at the end."""
    config = config or TrainConfig()
    if not dataset:
        raise ValueError("train: empty dataset")
    train_idx, val_idx = split_dataset(len(dataset), config.val_fraction, config.seed)
    if len(train_idx) == 0:
        raise ValueError("train: no training sequences after the validation split")
    rng = np.random.default_rng(config.seed + 1)
    history = TrainHistory()
    best_params = None
    start = time.monotonic()
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_idx))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = [dataset[train_idx[j]] for j in order[lo : lo + config.batch_size]]
            model.params.zero_grad()
            for seq in batch:
                loss = tt.scale(_sequence_loss(model, seq), 1.0 / len(batch))
                loss.backward()
                losses.append(float(loss.data) * len(batch))
            for p in model.params.params.values():
                if p.grad is None:  # parameter outside the loss graph (e.g.
                    p.grad = np.zeros_like(p.data)  # attention under avg_x)
            model.params.adam_step(config.lr)
        if val_idx.size:
            val_loss = float(np.mean([float(_sequence_loss(model, dataset[j]).data) for j in val_idx]))
        else:
            val_loss = float(np.mean(losses))
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_loss": val_loss,
            "wall_seconds": time.monotonic() - start,
        }
        history.epochs.append(record)
        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in model.params.params.items()}
    if best_params is not None:
        for k, arr in best_params.items():
            model.params[k].data = arr
    return history


def write_history_csv(history: TrainHistory, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_loss", "wall_seconds"])
        for rec in history.epochs:
            writer.writerow(
                [rec["epoch"], f"{rec['train_loss']:.9g}", f"{rec['val_loss']:.9g}",
                 f"{rec['wall_seconds']:.3f}"]
            )
