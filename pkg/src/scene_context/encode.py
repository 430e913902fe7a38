"""Injecting context vectors and retrieval priors into feature maps.

A context vector enters a feature map as a per-channel spatial bias through an
affine map: out[c, y, x] = fmap[c, y, x] + (W @ context + b)[c]. That is
numerically a 1x1 convolution of the feature map stacked on top of the context
vector duplicated at every position, with kernel [I | W]; the duplicate
construction is implemented separately so the identity can be verified rather
than assumed. Spatial priors are resized to the feature map and added through
a small zero-padded convolution, while a global prior vector rides the affine
path like any context vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .prior import bilinear_resize

ENCODER_MAGIC = b"GCEP"


@dataclass(frozen=True)
class EncoderParams:
    """Affine context path plus an optional convolutional prior path."""

    feature_weight: np.ndarray  # (C_f, context_dim)
    feature_bias: np.ndarray  # (C_f,)
    prior_kernel: np.ndarray | None = None  # (C_f, C_prior, k, k), odd k
    prior_bias: np.ndarray | None = None  # (C_f,)

    def __post_init__(self) -> None:
        w = np.asarray(self.feature_weight)
        b = np.asarray(self.feature_bias)
        if w.ndim != 2:
            raise ValueError(f"feature weight must be 2-D, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"feature bias must have shape ({w.shape[0]},), got {b.shape}")
        object.__setattr__(self, "feature_weight", w)
        object.__setattr__(self, "feature_bias", b)
        if (self.prior_kernel is None) != (self.prior_bias is None):
            raise ValueError("prior kernel and prior bias must be given together")
        if self.prior_kernel is not None:
            kernel = np.asarray(self.prior_kernel)
            bias = np.asarray(self.prior_bias)
            if kernel.ndim != 4 or kernel.shape[0] != w.shape[0]:
                raise ValueError(f"prior kernel must be ({w.shape[0]}, C_prior, k, k), got shape {kernel.shape}")
            if kernel.shape[2] != kernel.shape[3] or kernel.shape[2] % 2 == 0:
                raise ValueError("prior kernel must be square with odd extent")
            if bias.shape != (w.shape[0],):
                raise ValueError(f"prior bias must have shape ({w.shape[0]},), got {bias.shape}")
            object.__setattr__(self, "prior_kernel", kernel)
            object.__setattr__(self, "prior_bias", bias)

    @property
    def num_channels(self) -> int:
        return int(self.feature_weight.shape[0])

    @property
    def context_dim(self) -> int:
        return int(self.feature_weight.shape[1])


def _check_fmap(fmap: np.ndarray) -> np.ndarray:
    fmap = np.asarray(fmap)
    if fmap.ndim != 3 or fmap.shape[1] < 1 or fmap.shape[2] < 1:
        raise ValueError(f"feature map must be a non-empty C x H x W tensor, got shape {fmap.shape}")
    return fmap


def _check_context(context: np.ndarray, params: EncoderParams) -> np.ndarray:
    context = np.asarray(context)
    if context.shape != (params.context_dim,):
        raise ValueError(f"context must have dimension {params.context_dim}, got shape {context.shape}")
    return context


def feature_encode(fmap: np.ndarray, context: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Add the affinely mapped context vector to every spatial position."""
    fmap = _check_fmap(fmap)
    context = _check_context(context, params)
    if fmap.shape[0] != params.num_channels:
        raise ValueError(f"feature map has {fmap.shape[0]} channels, params expect {params.num_channels}")
    bias = params.feature_weight @ context + params.feature_bias
    return fmap + bias[:, None, None]


def conv2d_same(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Zero-padded stride-1 2-D convolution with an odd square kernel, preserving H x W."""
    x = _check_fmap(x)
    kernel = np.asarray(kernel)
    bias = np.asarray(bias)
    if kernel.ndim != 4 or kernel.shape[1] != x.shape[0]:
        raise ValueError(f"kernel must be (out, {x.shape[0]}, k, k), got shape {kernel.shape}")
    if kernel.shape[2] != kernel.shape[3] or kernel.shape[2] % 2 == 0:
        raise ValueError("kernel must be square with odd extent")
    if bias.shape != (kernel.shape[0],):
        raise ValueError(f"bias must have shape ({kernel.shape[0]},), got {bias.shape}")
    pad = kernel.shape[2] // 2
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel.shape[2:], axis=(1, 2))
    out = np.tensordot(kernel, windows, axes=([1, 2, 3], [0, 3, 4]))
    return out + bias[:, None, None]


def conv1x1_duplicate(fmap: np.ndarray, context: np.ndarray, params: EncoderParams) -> np.ndarray:
    """The memory-heavy equivalent of feature_encode: tile the context at every
    position, stack it under the feature channels, and convolve with [I | W]."""
    fmap = _check_fmap(fmap)
    context = _check_context(context, params)
    if fmap.shape[0] != params.num_channels:
        raise ValueError(f"feature map has {fmap.shape[0]} channels, params expect {params.num_channels}")
    _, h, w = fmap.shape
    tiled = np.broadcast_to(context[:, None, None], (context.shape[0], h, w))
    stacked = np.concatenate([fmap, tiled], axis=0)
    identity = np.eye(params.num_channels, dtype=params.feature_weight.dtype)
    kernel = np.concatenate([identity, params.feature_weight], axis=1)[:, :, None, None]
    return conv2d_same(stacked, kernel, params.feature_bias)


def prior_encode(
    fmap: np.ndarray,
    spatial: np.ndarray,
    global_vec: np.ndarray,
    params: EncoderParams,
) -> np.ndarray:
    """Resize the spatial prior to the map, convolve, and add; the global prior
    enters through the affine context path."""
    fmap = _check_fmap(fmap)
    if params.prior_kernel is None:
        raise ValueError("params carry no prior path (kernel is None)")
    spatial = np.asarray(spatial)
    if spatial.ndim != 3 or spatial.shape[0] != params.prior_kernel.shape[1]:
        raise ValueError(
            f"spatial prior must have {params.prior_kernel.shape[1]} channels, got shape {spatial.shape}"
        )
    resized = bilinear_resize(spatial, fmap.shape[1], fmap.shape[2])
    conv_out = conv2d_same(resized, params.prior_kernel, params.prior_bias)
    return feature_encode(fmap, global_vec, params) + conv_out


def zero_params(
    num_channels: int,
    context_dim: int,
    prior_channels: int | None = None,
    kernel_size: int = 1,
    dtype: np.dtype | type = np.float64,
) -> EncoderParams:
    """All-zero parameters (prior path included when prior_channels is given)."""
    kernel = bias = None
    if prior_channels is not None:
        kernel = np.zeros((num_channels, prior_channels, kernel_size, kernel_size), dtype=dtype)
        bias = np.zeros(num_channels, dtype=dtype)
    return EncoderParams(
        np.zeros((num_channels, context_dim), dtype=dtype),
        np.zeros(num_channels, dtype=dtype),
        kernel,
        bias,
    )


def random_params(
    rng: np.random.Generator,
    num_channels: int,
    context_dim: int,
    prior_channels: int | None = None,
    kernel_size: int = 1,
    dtype: np.dtype | type = np.float64,
) -> EncoderParams:
    kernel = bias = None
    if prior_channels is not None:
        kernel = rng.standard_normal((num_channels, prior_channels, kernel_size, kernel_size)).astype(dtype)
        bias = rng.standard_normal(num_channels).astype(dtype)
    return EncoderParams(
        rng.standard_normal((num_channels, context_dim)).astype(dtype),
        rng.standard_normal(num_channels).astype(dtype),
        kernel,
        bias,
    )


def save_encoder_params(path: str | Path, params: EncoderParams) -> None:
    """Write params: magic, u32 dims (C_f, context, C_prior, k), float64 arrays.

    C_prior and k are zero when the prior path is absent.
    """
    prior_channels = 0 if params.prior_kernel is None else params.prior_kernel.shape[1]
    kernel_size = 0 if params.prior_kernel is None else params.prior_kernel.shape[2]
    header = struct.pack(
        "<4sIIII", ENCODER_MAGIC, params.num_channels, params.context_dim, prior_channels, kernel_size
    )
    arrays = [params.feature_weight, params.feature_bias]
    if params.prior_kernel is not None:
        arrays += [params.prior_kernel, params.prior_bias]
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    Path(path).write_bytes(header + blob)


def load_encoder_params(path: str | Path) -> EncoderParams:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != ENCODER_MAGIC:
        raise ValueError(f"{path}: not an encoder checkpoint (bad magic)")
    num_channels, context_dim, prior_channels, kernel_size = struct.unpack_from("<IIII", raw, 4)
    shapes = [(num_channels, context_dim), (num_channels,)]
    if prior_channels:
        shapes += [(num_channels, prior_channels, kernel_size, kernel_size), (num_channels,)]
    total = sum(int(np.prod(s)) for s in shapes)
    if len(raw) != 20 + 8 * total:
        raise ValueError(f"{path}: checkpoint holds {len(raw) - 20} payload bytes, expected {8 * total}")
    flat = np.frombuffer(raw, dtype="<f8", offset=20)
    arrays = []
    cursor = 0
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(flat[cursor : cursor + size].reshape(shape).copy())
        cursor += size
    if prior_channels:
        return EncoderParams(arrays[0], arrays[1], arrays[2], arrays[3])
    return EncoderParams(arrays[0], arrays[1])
