"""Differentiable network layers.

Convolution, pooling, dense, LeakyReLU, softmax and cross-entropy cover
the image pathway; ``fusion_weight_matrix`` is the composite scoring
layer that reinterprets a learned vector as a per-class weight matrix and
dots each row with the designed-feature vector.  All layers register
their backward rules on the tape through :func:`autodiff.wrap_result`,
so anything built from them can be trained end to end.

Geometry is deliberately rigid: convolutions are valid (no padding) with
stride 1, pooling is 2x2 with stride 2, and odd spatial dimensions are a
hard error instead of a silent crop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, wrap_result
from .exceptions import ConfigError, DataError, NumericError, ShapeError


@dataclass
class ConvParams:
    """Kernels ``[F, C, kh, kw]`` and per-filter bias ``[F]``."""
    kernels: Tensor
    bias: Tensor

    def __post_init__(self) -> None:
        if self.kernels.data.ndim != 4:
            raise ShapeError(
                f"conv kernels must be rank 4, got shape {list(self.kernels.shape)}")
        f, _, kh, kw = self.kernels.shape
        if min(f, kh, kw) < 1:
            raise ShapeError(f"conv kernel dims must be >= 1, got {list(self.kernels.shape)}")
        if self.bias.shape != (f,):
            raise ShapeError(
                f"conv bias must have shape [{f}], got {list(self.bias.shape)}")


@dataclass
class DenseParams:
    """Weights ``[p, q]`` and bias ``[q]`` for a fully connected layer."""
    weights: Tensor
    bias: Tensor

    def __post_init__(self) -> None:
        if self.weights.data.ndim != 2:
            raise ShapeError(
                f"dense weights must be rank 2, got shape {list(self.weights.shape)}")
        q = self.weights.shape[1]
        if self.bias.shape != (q,):
            raise ShapeError(
                f"dense bias must have shape [{q}], got {list(self.bias.shape)}")


@dataclass
class FusionShape:
    """Dimensions tying the learned vector to the weight-matrix view.

    A learned vector of length ``m`` is reshaped into ``n_classes`` rows
    of ``n_features`` weights each, so ``m == n_classes * n_features``
    must hold exactly.
    """
    n_classes: int
    n_features: int
    m: int

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ShapeError(f"need at least 2 classes, got {self.n_classes}")
        if self.n_features < 1:
            raise ShapeError(f"need at least 1 designed feature, got {self.n_features}")
        if self.m != self.n_classes * self.n_features:
            raise ShapeError(
                f"learned width {self.m} != n_classes*n_features "
                f"= {self.n_classes * self.n_features}")

    @classmethod
    def of(cls, n_classes: int, n_features: int) -> "FusionShape":
        return cls(n_classes, n_features, n_classes * n_features)


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Valid cross-correlation, stride 1, plus per-filter bias.

    ``x`` is ``[B, C, H, W]``; the result is ``[B, F, H-kh+1, W-kw+1]``.
    Internally the input windows are flattened to columns so the whole
    batch reduces to one matrix product per sample.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4, got shape {list(x.shape)}")
    batch, c_in, h, w = x.shape
    f, c_k, kh, kw = params.kernels.shape
    if c_k != c_in:
        raise ShapeError(f"kernel channels {c_k} != input channels {c_in}")
    if kh > h or kw > w:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than input {h}x{w}")
    oh, ow = h - kh + 1, w - kw + 1

    # [B, C, OH, OW, kh, kw] view over sliding windows, then columns
    # [B, OH*OW, C*kh*kw] so each output pixel is a dot product.
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        batch, oh * ow, c_in * kh * kw)
    kmat = params.kernels.data.reshape(f, c_in * kh * kw)
    out = (cols @ kmat.T + params.bias.data).transpose(0, 2, 1).reshape(batch, f, oh, ow)

    need_x = x.grad_tracked

    def backward(g):
        g_cols_f = np.ascontiguousarray(
            g.reshape(batch, f, oh * ow).transpose(0, 2, 1))  # [B, OH*OW, F]
        g_k = (g_cols_f.reshape(batch * oh * ow, f).T
               @ cols.reshape(batch * oh * ow, c_in * kh * kw)
               ).reshape(f, c_in, kh, kw)
        g_b = g.sum(axis=(0, 2, 3))
        if not need_x:
            return None, g_k, g_b
        # grad wrt input is the full correlation of g with the spatially
        # flipped kernels, channel roles swapped; one matmul via im2col
        # over the zero-padded output gradient.
        g_pad = np.zeros((batch, f, h + kh - 1, w + kw - 1))
        g_pad[:, :, kh - 1:kh - 1 + oh, kw - 1:kw - 1 + ow] = g
        g_wins = np.lib.stride_tricks.sliding_window_view(g_pad, (kh, kw), axis=(2, 3))
        g_cols = np.ascontiguousarray(g_wins.transpose(0, 2, 3, 1, 4, 5)).reshape(
            batch, h * w, f * kh * kw)
        k_flip = np.ascontiguousarray(
            params.kernels.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(
            c_in, f * kh * kw)
        g_x = (g_cols @ k_flip.T).transpose(0, 2, 1).reshape(batch, c_in, h, w)
        return g_x, g_k, g_b

    return wrap_result(out, (x, params.kernels, params.bias), backward)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over ``[B, C, H, W]``.

    Spatial dims must be even.  Ties route the gradient to the first
    maximal element of the window in row-major order, so backward is
    deterministic even on constant inputs.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d input must be rank 4, got shape {list(x.shape)}")
    batch, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    oh, ow = h // 2, w // 2
    # [B, C, OH, OW, 4] with the window flattened row-major, so argmax
    # picks the first maximum in row-major window order.
    wins = x.data.reshape(batch, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    wins = np.ascontiguousarray(wins).reshape(batch, c, oh, ow, 4)
    out = wins.max(axis=-1)
    winners = wins.argmax(axis=-1)

    def backward(g):
        g_wins = np.where(np.arange(4) == winners[..., None], g[..., None], 0.0)
        return (g_wins.reshape(batch, c, oh, ow, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5).reshape(batch, c, h, w),)

    return wrap_result(out, (x,), backward)


def dense(x: Tensor, params: DenseParams) -> Tensor:
    """Affine map ``x @ weights + bias`` over a batch ``[B, p]``."""
    if x.data.ndim != 2:
        raise ShapeError(f"dense input must be rank 2, got shape {list(x.shape)}")
    p, q = params.weights.shape
    if x.shape[1] != p:
        raise ShapeError(f"dense input width {x.shape[1]} != weight rows {p}")
    out = x.data @ params.weights.data + params.bias.data

    def backward(g):
        return g @ params.weights.data.T, x.data.T @ g, g.sum(axis=0)

    return wrap_result(out, (x, params.weights, params.bias), backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """Elementwise ``x if x >= 0 else slope * x``.

    The derivative at exactly 0 is 1 (the non-negative branch).
    """
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must be in (0, 1), got {slope}")
    nonneg = x.data >= 0
    out = np.where(nonneg, x.data, slope * x.data)

    def backward(g):
        return (np.where(nonneg, g, slope * g),)

    return wrap_result(out, (x,), backward)


def concat_columns(a: Tensor, b: Tensor) -> Tensor:
    """Join two batches ``[B, p]`` and ``[B, q]`` into ``[B, p+q]``."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("concat_columns needs rank-2 operands")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(
            f"concat_columns batch sizes differ: {a.shape[0]} vs {b.shape[0]}")
    p = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :p], g[:, p:]

    return wrap_result(out, (a, b), backward)


def fusion_weight_matrix(learned: Tensor, shape: FusionShape, designed: Tensor) -> Tensor:
    """Class scores from a learned weight matrix applied to designed features.

    Each sample's learned vector ``[m]`` is reshaped row-major into a
    matrix with one row of ``n_features`` weights per class; the score
    for class ``k`` is the dot product of row ``k`` with that sample's
    designed-feature vector.  The layer is bilinear, so the gradients are
    exact: dO_k/dW_kj is the designed feature j and dO_k/dD_j is the
    learned weight W_kj.
    """
    if learned.data.ndim != 2:
        raise ShapeError(
            f"fusion learned input must be rank 2, got shape {list(learned.shape)}")
    if designed.data.ndim != 2:
        raise ShapeError(
            f"fusion designed input must be rank 2, got shape {list(designed.shape)}")
    batch = learned.shape[0]
    if learned.shape[1] != shape.m:
        raise ShapeError(
            f"learned width {learned.shape[1]} != expected {shape.m}")
    if designed.shape != (batch, shape.n_features):
        raise ShapeError(
            f"designed features must be [{batch}, {shape.n_features}], "
            f"got {list(designed.shape)}")
    per_class = learned.data.reshape(batch, shape.n_classes, shape.n_features)
    out = np.einsum("bkn,bn->bk", per_class, designed.data)

    def backward(g):
        g_learned = (g[:, :, None] * designed.data[:, None, :]).reshape(batch, shape.m)
        g_designed = np.einsum("bk,bkn->bn", g, per_class)
        return g_learned, g_designed

    return wrap_result(out, (learned, designed), backward)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax of ``[B, k]`` logits, max-subtracted for stability."""
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(
            f"softmax needs [batch, classes>=2] logits, got {list(logits.shape)}")
    if not np.isfinite(logits.data).all():
        raise NumericError("softmax received non-finite logits")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * probs).sum(axis=1, keepdims=True)
        return (probs * (g - inner),)

    return wrap_result(probs, (logits,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``[B, k]`` logits against int labels.

    Computed through the fused log-sum-exp form
    ``logsumexp(row) - row[label]`` so no probability is materialized on
    the forward path.
    """
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(
            f"cross_entropy needs [batch, classes>=2] logits, got {list(logits.shape)}")
    if not np.isfinite(logits.data).all():
        raise NumericError("cross_entropy received non-finite logits")
    batch, k = logits.shape
    y = np.asarray(labels)
    if y.shape != (batch,) or not np.issubdtype(y.dtype, np.integer):
        raise DataError(f"labels must be {batch} integers, got {y.dtype} {list(y.shape)}")
    if y.min() < 0 or y.max() >= k:
        raise DataError(f"labels must lie in [0, {k}), got range "
                        f"[{int(y.min())}, {int(y.max())}]")
    row_max = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - row_max
    lse = np.log(np.exp(shifted).sum(axis=1)) + row_max[:, 0]
    picked = logits.data[np.arange(batch), y]
    out = np.asarray((lse - picked).mean(), dtype=np.float64)

    def backward(g):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(batch), y] -= 1.0
        return (float(g) / batch * probs, None)

    return wrap_result(out, (logits, None), backward)
