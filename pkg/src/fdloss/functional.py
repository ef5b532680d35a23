"""Differentiable CNN primitives on channels-last (``h x w x c``) tensors.

Every op also accepts a leading batch axis (``n x h x w x c``); the
unbatched form is treated as a batch of one.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, make_node, note_branch
from .errors import DimensionError, ValidationError


def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"{op} expects h x w x c or n x h x w x c input, got {x.shape}")


def _resolve_padding(padding, k: int) -> int:
    if padding == "valid":
        return 0
    if padding == "same":
        return (k - 1) // 2
    if isinstance(padding, (int, np.integer)) and padding >= 0:
        return int(padding)
    raise ValidationError(f"padding must be 'valid', 'same' or a non-negative int, got {padding!r}")


def output_extent(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, _, _, c = xp.shape
    cols = np.empty((n, oh, ow, k, k, c))
    hi, wi = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + hi : stride, j : j + wi : stride, :]
    return cols


def _col2im(cols: np.ndarray, padded_shape, k: int, stride: int) -> np.ndarray:
    n, oh, ow = cols.shape[:3]
    out = np.zeros(padded_shape)
    hi, wi = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, i : i + hi : stride, j : j + wi : stride, :] += cols[:, :, :, i, j, :]
    return out


def conv2d(x, kernels, bias=None, stride: int = 1, padding="valid") -> Tensor:
    """Cross-correlate ``x`` with ``kernels`` of shape ``k x k x c_in x c_out``."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    xb, single = _batched(x, "conv2d")
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise DimensionError(f"kernels must be k x k x c_in x c_out, got {kernels.shape}")
    k, _, c_in, c_out = kernels.shape
    if xb.shape[3] != c_in:
        raise DimensionError(f"input has {xb.shape[3]} channels, kernels expect {c_in}")
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    pad = _resolve_padding(padding, k)
    n, h, w, _ = xb.shape
    if k > h + 2 * pad or k > w + 2 * pad:
        raise DimensionError(f"kernel {k}x{k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    oh, ow = output_extent(h, k, stride, pad), output_extent(w, k, stride, pad)
    xp = np.pad(xb, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xb
    cols = _im2col(xp, k, stride, oh, ow).reshape(n * oh * ow, k * k * c_in)
    wmat = kernels.data.reshape(k * k * c_in, c_out)
    out = cols @ wmat
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"bias must have shape ({c_out},), got {bias.shape}")
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(n, oh, ow, c_out)
    if single:
        out = out[0]

    def back(g):
        g2 = g.reshape(n * oh * ow, c_out)
        dcols = (g2 @ wmat.T).reshape(n, oh, ow, k, k, c_in)
        dxp = _col2im(dcols, xp.shape, k, stride)
        dx = dxp[:, pad : pad + h, pad : pad + w, :] if pad else dxp
        grads = [dx[0] if single else dx, (cols.T @ g2).reshape(kernels.shape)]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_node(out, parents, back)


def pool2d(x, window: int, stride: int | None = None, kind: str = "max") -> Tensor:
    """Max or average pooling over ``window x window`` patches (no padding).

    Max-pool gradients go to the first maximal entry in row-major order.
    """
    x = as_tensor(x)
    xb, single = _batched(x, "pool2d")
    stride = window if stride is None else stride
    if kind not in ("max", "avg"):
        raise ValidationError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    n, h, w, c = xb.shape
    if window > h or window > w:
        raise DimensionError(f"pool window {window} exceeds input extent {h}x{w}")
    oh, ow = output_extent(h, window, stride, 0), output_extent(w, window, stride, 0)
    cols = _im2col(xb, window, stride, oh, ow).reshape(n, oh, ow, window * window, c)
    if kind == "max":
        winner = cols.argmax(axis=3)
        note_branch(winner)
        out = np.take_along_axis(cols, winner[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    else:
        out = cols.mean(axis=3)
    if single:
        out = out[0]

    def back(g):
        gb = g[None] if single else g
        if kind == "max":
            onehot = winner[:, :, :, None, :] == np.arange(window * window)[None, None, None, :, None]
            dcols = onehot * gb[:, :, :, None, :]
        else:
            dcols = np.broadcast_to(gb[:, :, :, None, :] / (window * window), cols.shape)
        dcols = dcols.reshape(n, oh, ow, window, window, c)
        dx = _col2im(dcols, xb.shape, window, stride)
        return (dx[0] if single else dx,)

    return make_node(out, (x,), back)


def global_avg_pool(x) -> Tensor:
    """Spatial mean: ``h x w x c -> c`` (or ``n x h x w x c -> n x c``)."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"global_avg_pool expects rank 3 or 4, got {x.shape}")
    return x.mean(axis=(-3, -2))


def flatten(x) -> Tensor:
    """Collapse all but the batch axis (rank-3 input is treated as unbatched)."""
    x = as_tensor(x)
    if x.ndim == 3:
        return x.reshape(-1)
    return x.reshape(x.shape[0], -1)


def dense(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias`` for a vector or a batch of rows."""
    x = as_tensor(x)
    if x.ndim == 1:
        out = dense(x.reshape(1, -1), weight, bias)
        return out.reshape(-1)
    out = x @ weight
    return out + bias if bias is not None else out


def softmax(logits) -> np.ndarray:
    """Row-wise softmax of a plain array (no graph)."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_onehot(onehot: np.ndarray) -> None:
    ok = np.all((onehot == 0) | (onehot == 1)) and np.all(onehot.sum(axis=-1) == 1)
    if not ok:
        raise ValidationError("targets must be one-hot rows with exactly one 1")


def softmax_cross_entropy(logits, onehot) -> Tensor:
    """Cross entropy of softmax(logits) against one-hot targets.

    Returns a scalar for a single ``n``-vector, or one loss per row for a
    batch of rows.
    """
    logits = as_tensor(logits)
    y = np.asarray(onehot.data if isinstance(onehot, Tensor) else onehot, dtype=np.float64)
    if logits.shape != y.shape:
        raise DimensionError(f"logits {logits.shape} and targets {y.shape} differ")
    if logits.shape[-1] < 2:
        raise ValidationError("need at least two classes")
    _check_onehot(y)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    loss = -(y * logp).sum(axis=-1)
    probs = np.exp(logp)
    return make_node(loss, (logits,), lambda g: ((probs - y) * np.expand_dims(g, -1),))


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (n_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def l2norm(x, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the zero vector is 0."""
    x = as_tensor(x)
    norm = np.sqrt((x.data**2).sum(axis=axis))

    def back(g):
        safe = np.where(norm > 0, norm, 1.0)
        scale = np.where(norm > 0, g / safe, 0.0)
        return (x.data * np.expand_dims(scale, axis),)

    return make_node(norm, (x,), back)


def keep_where(x, keep: np.ndarray) -> Tensor:
    """Zero the entries of ``x`` where ``keep`` is False; ``keep`` is a constant."""
    x = as_tensor(x)
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != x.shape:
        raise DimensionError(f"mask {keep.shape} does not match {x.shape}")
    note_branch(keep)
    return make_node(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,))
