"""Raster-to-token conversion: patch embedding plus a learnable conv path.

A raster becomes n = (size / patch)^2 tokens twice over: once by linearly
projecting flattened non-overlapping patches, once through a four-layer
strided conv stack whose receptive field exceeds a single patch. The two
sequences are summed residually to form the encoder input.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import DataConfig
from .data import RasterInstance
from .encoder import TokenSequence
from .tensor import ShapeError, Tensor


class TokenizerParams:
    """Trainable patch projection and conv stack for one modality.

    Conv channels ramp to the embedding dim with ReLU between layers; the
    stride schedule must multiply out to the patch size so both paths land
    on the same token grid.
    """

    def __init__(self, data_cfg: DataConfig, dim: int, rng: np.random.Generator):
        size, patch, c = data_cfg.input_size, data_cfg.patch, data_cfg.channels
        if size % patch != 0:
            raise ShapeError(f"input size {size} not divisible by patch {patch}")
        if int(np.prod(data_cfg.conv_strides)) != patch:
            raise ShapeError(f"conv strides {data_cfg.conv_strides} must multiply to patch {patch}")
        if len(data_cfg.conv_channels) != len(data_cfg.conv_strides):
            raise ShapeError("conv_channels and conv_strides must have equal length")
        if data_cfg.conv_channels[-1] != dim:
            raise ShapeError(f"last conv width {data_cfg.conv_channels[-1]} must equal dim {dim}")

        self.cfg = data_cfg
        self.dim = dim
        self.grid = size // patch
        patch_pixels = patch * patch * c

        def tn(shape):
            return Tensor(_trunc_normal(rng, shape, 0.02), requires_grad=True)

        self.patch_w = tn((patch_pixels, dim))
        self.patch_b = Tensor(np.zeros(dim), requires_grad=True)
        self.conv_kernels: list[Tensor] = []
        self.conv_biases: list[Tensor] = []
        k = data_cfg.conv_kernel
        c_in = c
        for c_out in data_cfg.conv_channels:
            self.conv_kernels.append(tn((k, k, c_in, c_out)))
            self.conv_biases.append(Tensor(np.zeros(c_out), requires_grad=True))
            c_in = c_out

    def named_parameters(self, prefix: str):
        yield f"{prefix}.patch_w", self.patch_w
        yield f"{prefix}.patch_b", self.patch_b
        for i, (kk, bb) in enumerate(zip(self.conv_kernels, self.conv_biases)):
            yield f"{prefix}.conv{i}.kernel", kk
            yield f"{prefix}.conv{i}.bias", bb


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    for _ in range(8):
        bad = np.abs(out) > 2 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(out, -2 * std, 2 * std)


def _check_input(x: RasterInstance, cfg: DataConfig) -> None:
    h, w, c = x.pixels.shape
    if h != cfg.input_size or w != cfg.input_size:
        raise ShapeError(f"raster {x.instance_id!r} is {h}x{w}, config wants "
                         f"{cfg.input_size}x{cfg.input_size}")
    if c != cfg.channels:
        raise ShapeError(f"raster {x.instance_id!r} has {c} channels, config wants {cfg.channels}")
    if cfg.input_size % cfg.patch != 0:
        raise ShapeError(f"input size {cfg.input_size} not divisible by patch {cfg.patch}")


def patch_matrix(pixels: np.ndarray, patch: int) -> np.ndarray:
    """Flatten non-overlapping patches row-major over the patch grid."""
    h, w, c = pixels.shape
    g = h // patch
    cut = pixels.reshape(g, patch, g, patch, c).transpose(0, 2, 1, 3, 4)
    return cut.reshape(g * g, patch * patch * c)


def patch_tokens(x: RasterInstance, p: TokenizerParams) -> TokenSequence:
    """Vanilla tokens: each patch linearly projected to the embedding dim."""
    _check_input(x, p.cfg)
    patches = Tensor(patch_matrix(x.pixels, p.cfg.patch))
    tokens = T.add_rows(T.matmul(patches, p.patch_w), p.patch_b)
    return TokenSequence(tokens, modality=x.modality)


def conv_tokens(x: RasterInstance, p: TokenizerParams) -> TokenSequence:
    """Structure-aware tokens from the hierarchical conv stack."""
    _check_input(x, p.cfg)
    pad = p.cfg.conv_kernel // 2
    h = Tensor(x.pixels)
    last = len(p.conv_kernels) - 1
    for i, (kernel, bias, stride) in enumerate(
            zip(p.conv_kernels, p.conv_biases, p.cfg.conv_strides)):
        h = T.conv2d(h, kernel, bias, stride=stride, padding=pad)
        if i != last:
            h = T.relu(h)
    g = p.grid
    if h.shape[:2] != (g, g):
        raise ShapeError(f"conv stack produced grid {h.shape[:2]}, patch grid is ({g}, {g})")
    tokens = T.reshape(h, (g * g, p.dim))
    return TokenSequence(tokens, modality=x.modality)


def fuse_tokens(v: TokenSequence, n: TokenSequence) -> TokenSequence:
    """Residual sum of the patch and conv token sequences."""
    if v.tokens.shape != n.tokens.shape:
        raise ShapeError(f"fuse_tokens: token shapes differ: {v.tokens.shape} vs {n.tokens.shape}")
    return TokenSequence(T.add(v.tokens, n.tokens), modality=v.modality)


def tokenize_raster(x: RasterInstance, p: TokenizerParams) -> TokenSequence:
    return fuse_tokens(patch_tokens(x, p), conv_tokens(x, p))
