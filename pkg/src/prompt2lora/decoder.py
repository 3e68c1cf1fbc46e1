"""Cascaded hyper-convolutional decoder: condition tensors in, weight grids out.

A block maps ``[B, N, L, C] -> [B, N', L', C']`` with five 2-D convolutions::

    c_w = conv_h1(conv_w1(x))
    c_h = conv_w2(conv_h2(x))
    out = conv_l((c_w + c_h + b) / 3)

Each convolution views the tensor as a stack of feature maps over two of
the three axes and treats the third as channels:

* ``conv_w``: maps over (L, C), channels N; the only conv that resizes C.
* ``conv_h``: maps over (L, N), channels C; the only conv that resizes L.
* ``conv_l``: maps over (N, L), channels C; the only conv that resizes N.

With this split both branch orders land on ``(N, L', C')`` so they can be
summed.  An axis shrinking by an integer factor uses a strided conv; any
other size change interpolates (nearest) to the target and then applies a
stride-1 conv.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError


@dataclass(frozen=True)
class BlockSpec:
    in_dims: tuple
    out_dims: tuple
    kernel_w: tuple = (3, 3)
    kernel_h: tuple = (3, 3)
    kernel_l: tuple = (3, 3)

    def to_dict(self):
        return {k: list(v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class DecoderSpec:
    blocks: tuple
    input_dims: tuple | None = None  # raw embedding dims when a front projection is used
    activation: bool = True

    @property
    def front_dims(self):
        return tuple(self.input_dims) if self.input_dims is not None else tuple(self.blocks[0].in_dims)

    @property
    def out_dims(self):
        return tuple(self.blocks[-1].out_dims)

    def to_dict(self):
        return {
            "blocks": [b.to_dict() for b in self.blocks],
            "input_dims": None if self.input_dims is None else list(self.input_dims),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d):
        blocks = tuple(BlockSpec(**{k: tuple(v) for k, v in b.items()}) for b in d["blocks"])
        inp = d.get("input_dims")
        return cls(blocks, None if inp is None else tuple(inp), d.get("activation", True))


@dataclass
class Diagnostic:
    block: int | None
    message: str

    def __str__(self):
        where = "decoder" if self.block is None else f"block {self.block}"
        return f"{where}: {self.message}"


def _axis_plan(src, dst, k):
    """(pre-resize target, stride, padding) for one spatial axis."""
    if dst == src:
        return src, 1, (k - 1) // 2
    if dst < src and src % dst == 0:
        f = src // dst
        return src, f, max(0, math.ceil((k - f) / 2))
    return dst, 1, (k - 1) // 2


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def validate_spec(spec: DecoderSpec, grid_dims=None):
    """First violation found in ``spec`` as a Diagnostic, or None when the spec is sound."""
    if not spec.blocks:
        return Diagnostic(None, "decoder has no blocks")
    if spec.input_dims is not None:
        n, _, c = spec.input_dims
        bn, _, bc = spec.blocks[0].in_dims
        if (n, c) != (bn, bc):
            return Diagnostic(0, f"front projection only changes L; input {tuple(spec.input_dims)} "
                                 f"cannot feed block 0 expecting {tuple(spec.blocks[0].in_dims)}")
    prev = None
    for i, b in enumerate(spec.blocks):
        if len(b.in_dims) != 3 or len(b.out_dims) != 3:
            return Diagnostic(i, "dims must be (N, L, C) triples")
        if min(b.in_dims) < 1 or min(b.out_dims) < 1:
            return Diagnostic(i, f"dims must be positive, got {b.in_dims} -> {b.out_dims}")
        for name in ("kernel_w", "kernel_h", "kernel_l"):
            ks = getattr(b, name)
            if len(ks) != 2 or any(k < 1 or k % 2 == 0 for k in ks):
                return Diagnostic(i, f"{name} must be two odd positive sizes, got {ks}")
        if prev is not None and tuple(b.in_dims) != tuple(prev):
            return Diagnostic(i, f"expects input {tuple(b.in_dims)} but block {i - 1} emits {tuple(prev)}")
        (n, l, c), (n2, l2, c2) = b.in_dims, b.out_dims
        kw, kh = b.kernel_w, b.kernel_h
        # branch 1: conv_w over (L, C) then conv_h over (L, N)
        t = (n, _plan_len(l, l, kw[0]), _plan_len(c, c2, kw[1]))
        s1 = (_plan_len(t[0], t[0], kh[1]), _plan_len(t[1], l2, kh[0]), t[2])
        # branch 2: conv_h then conv_w
        t = (_plan_len(n, n, kh[1]), _plan_len(l, l2, kh[0]), c)
        s2 = (t[0], _plan_len(t[1], t[1], kw[0]), _plan_len(t[2], c2, kw[1]))
        if s1 != s2 or s1 != (n, l2, c2):
            return Diagnostic(i, f"branch shapes {s1} and {s2} disagree with target {(n, l2, c2)}")
        if _plan_len(n, n2, b.kernel_l[0]) != n2:
            return Diagnostic(i, f"layer conv cannot map N={n} to {n2}")
        prev = b.out_dims
    if grid_dims is not None and tuple(spec.out_dims) != tuple(grid_dims):
        return Diagnostic(None, f"final dims {tuple(spec.out_dims)} differ from weight grid dims {tuple(grid_dims)}")
    return None


def _plan_len(src, dst, k):
    size, stride, pad = _axis_plan(src, dst, k)
    return _conv_out(size, k, stride, pad)


class PlaneConv(nn.Module):
    """Bias-free 2-D conv over a (H, W) plane that resizes it to ``out_hw``."""

    def __init__(self, channels, kernel, in_hw, out_hw):
        super().__init__()
        plans = [_axis_plan(s, d, k) for s, d, k in zip(in_hw, out_hw, kernel)]
        self.pre = tuple(p[0] for p in plans)
        self.needs_resize = self.pre != tuple(in_hw)
        self.conv = nn.Conv2d(channels, channels, tuple(kernel),
                              stride=tuple(p[1] for p in plans), padding=tuple(p[2] for p in plans), bias=False)

    def forward(self, x):
        if self.needs_resize:
            x = F.interpolate(x, size=self.pre, mode="nearest")
        return self.conv(x)


class HyperConvBlock(nn.Module):
    def __init__(self, spec: BlockSpec, activation=True):
        super().__init__()
        (n, l, c), (n2, l2, c2) = spec.in_dims, spec.out_dims
        self.spec = spec
        self.act = nn.GELU() if activation else nn.Identity()
        self.conv_w1 = PlaneConv(n, spec.kernel_w, (l, c), (l, c2))
        self.conv_h1 = PlaneConv(c2, spec.kernel_h, (l, n), (l2, n))
        self.conv_h2 = PlaneConv(c, spec.kernel_h, (l, n), (l2, n))
        self.conv_w2 = PlaneConv(n, spec.kernel_w, (l2, c), (l2, c2))
        self.conv_l = PlaneConv(c2, spec.kernel_l, (n, l2), (n2, l2))
        self.bias = nn.Parameter(torch.zeros(n, l2, c2))

    @staticmethod
    def _over_ln(conv, x):
        # [B, N, L, C] -> [B, C, L, N] -> conv -> back
        return conv(x.permute(0, 3, 2, 1)).permute(0, 3, 2, 1)

    def forward(self, x):
        a = self.act(self.conv_w1(x))
        c_w = self.act(self._over_ln(self.conv_h1, a))
        h = self.act(self._over_ln(self.conv_h2, x))
        c_h = self.act(self.conv_w2(h))
        z = (c_w + c_h + self.bias) / 3
        # [B, N, L, C] -> [B, C, N, L] -> conv -> back
        return self.conv_l(z.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)


class HyperDecoder(nn.Module):
    def __init__(self, spec: DecoderSpec, seed=0):
        super().__init__()
        diag = validate_spec(spec)
        if diag is not None:
            raise ConfigurationError(str(diag))
        self.spec = spec
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.front = None
            if spec.input_dims is not None and spec.input_dims[1] != spec.blocks[0].in_dims[1]:
                self.front = nn.Linear(spec.input_dims[1], spec.blocks[0].in_dims[1])
            self.blocks = nn.ModuleList(HyperConvBlock(b, spec.activation) for b in spec.blocks)

    def forward(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if tuple(x.shape[1:]) != self.spec.front_dims:
            raise ConfigurationError(f"input dims {tuple(x.shape[1:])} differ from decoder front {self.spec.front_dims}")
        if self.front is not None:
            x = self.front(x.transpose(2, 3)).transpose(2, 3)
        for blk in self.blocks:
            x = blk(x)
        return x


def decoder_forward(emb, decoder: HyperDecoder):
    """Run ``decoder`` on an embedding array or tensor ``[B, N, L, C]`` (or unbatched)."""
    x = torch.as_tensor(getattr(emb, "values", emb), dtype=next(decoder.parameters()).dtype)
    return decoder(x)


def chain_spec(dims, kernel=3, input_dims=None, activation=True):
    """DecoderSpec visiting ``dims`` in order with uniform square kernels."""
    k = (kernel, kernel)
    blocks = tuple(BlockSpec(tuple(a), tuple(b), k, k, k) for a, b in zip(dims[:-1], dims[1:]))
    return DecoderSpec(blocks, None if input_dims is None else tuple(input_dims), activation)


def desk_spec(in_dims, grid_dims, n_blocks=4, kernel=3, activation=True):
    """Geometric schedule from ``in_dims`` to ``grid_dims`` over ``n_blocks`` blocks."""
    dims = []
    for i in range(n_blocks + 1):
        t = i / n_blocks
        dims.append(tuple(max(1, int(round(a ** (1 - t) * b ** t))) for a, b in zip(in_dims, grid_dims)))
    dims[0], dims[-1] = tuple(in_dims), tuple(grid_dims)
    return chain_spec(dims, kernel, activation=activation)


# A full-size schedule for a 384-dim sentence encoder and a rank-8 adapter
# grid, and a reduced analog (every dim divided by 8, rounded) used in tests.
LARGE_SCHEDULE = [
    (128, 384, 384), (128, 200, 300), (128, 100, 256), (256, 50, 200), (512, 50, 200),
    (1024, 25, 200), (1024, 10, 200), (2048, 10, 200), (4296, 8, 128),
]
REDUCED_SCHEDULE = [
    (16, 48, 48), (16, 25, 38), (16, 13, 32), (32, 7, 25), (64, 7, 25),
    (128, 4, 25), (128, 2, 25), (256, 2, 25), (537, 1, 16),
]
