"""Lossless tokenization of LoRA checkpoints into ``[N_w, L_w, C_w]`` grids.

Each layer's factors are flattened row-major (A before B), cut into tokens
of ``C_w`` values with the last token zero-padded, and the tokens of all
layers are laid out row by row, ``L_w`` tokens per row.  Unused tokens at
the end of the grid are zero as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, StructuralError
from .fileio import read_tensor_file, write_tensor_file
from .zoo import LoRACheckpoint

GRID_MAGIC = b"P2LGRID\x00"


@dataclass(frozen=True)
class LayerEntry:
    name: str
    shapes: tuple  # one shape per factor, in flattening order
    flat_length: int


@dataclass(frozen=True)
class WeightLayout:
    layers: tuple
    token_len: int
    row_len: int
    tokens_per_layer: tuple
    pad_counts: tuple

    @property
    def total_tokens(self):
        return sum(self.tokens_per_layer)

    @property
    def grid_dims(self):
        return (math.ceil(self.total_tokens / self.row_len), self.row_len, self.token_len)

    def mask(self):
        """Boolean grid that is True exactly on positions holding real weights."""
        flat = np.zeros(int(np.prod(self.grid_dims)), dtype=bool)
        pos = 0
        for n_tok, entry in zip(self.tokens_per_layer, self.layers):
            flat[pos : pos + entry.flat_length] = True
            pos += n_tok * self.token_len
        return flat.reshape(self.grid_dims)

    def to_dict(self):
        return {
            "layers": [{"name": e.name, "shapes": [list(s) for s in e.shapes]} for e in self.layers],
            "token_len": self.token_len,
            "row_len": self.row_len,
        }

    @classmethod
    def from_dict(cls, d):
        schema = [(e["name"], *[tuple(s) for s in e["shapes"]]) for e in d["layers"]]
        return build_layout(schema, d["token_len"], d["row_len"])


@dataclass
class WeightTokenGrid:
    values: np.ndarray
    layout: WeightLayout

    def save(self, path):
        return write_tensor_file(path, GRID_MAGIC, {"layout": self.layout.to_dict()}, {"grid": self.values})

    @classmethod
    def load(cls, path):
        meta, t = read_tensor_file(path, GRID_MAGIC)
        return cls(t["grid"], WeightLayout.from_dict(meta["layout"]))


def build_layout(schema, token_len=128, row_len=8):
    """Layout for ``schema``: a sequence of ``(name, shape, shape, ...)`` entries.

    ``LoRACheckpoint.schema()`` produces exactly this form.
    """
    if token_len < 1 or row_len < 1:
        raise DomainError("token_len and row_len must be >= 1")
    schema = list(schema)
    if not schema:
        raise DomainError("cannot lay out an empty schema")
    layers, tokens, pads = [], [], []
    for name, *shapes in schema:
        shapes = tuple(tuple(int(x) for x in s) for s in shapes)
        n = sum(int(np.prod(s)) for s in shapes)
        if n < 1:
            raise DomainError(f"layer {name!r} has no parameters")
        t = math.ceil(n / token_len)
        layers.append(LayerEntry(name, shapes, n))
        tokens.append(t)
        pads.append(t * token_len - n)
    return WeightLayout(tuple(layers), token_len, row_len, tuple(tokens), tuple(pads))


def encode(checkpoint: LoRACheckpoint, layout: WeightLayout) -> WeightTokenGrid:
    by_name = {name: (A, B) for name, A, B in checkpoint.layers}
    if set(by_name) != {e.name for e in layout.layers}:
        raise StructuralError(
            f"checkpoint layers {sorted(by_name)} do not match layout layers {[e.name for e in layout.layers]}"
        )
    flat = np.zeros(int(np.prod(layout.grid_dims)), dtype=np.float32)
    pos = 0
    for n_tok, entry in zip(layout.tokens_per_layer, layout.layers):
        factors = by_name[entry.name]
        if tuple(tuple(f.shape) for f in factors) != entry.shapes:
            raise StructuralError(
                f"{entry.name}: factor shapes {[f.shape for f in factors]} differ from layout {entry.shapes}"
            )
        vec = np.concatenate([np.asarray(f, dtype=np.float32).ravel() for f in factors])
        flat[pos : pos + entry.flat_length] = vec
        pos += n_tok * layout.token_len
    return WeightTokenGrid(flat.reshape(layout.grid_dims), layout)


def decode(grid: WeightTokenGrid, task_id="generated", step_id=0) -> LoRACheckpoint:
    layout = grid.layout
    values = np.asarray(grid.values)
    if values.shape != layout.grid_dims:
        raise StructuralError(f"grid shape {values.shape} does not match layout dims {layout.grid_dims}")
    flat = values.reshape(-1).astype(np.float32, copy=False)
    layers, pos = [], 0
    for n_tok, entry in zip(layout.tokens_per_layer, layout.layers):
        chunk = flat[pos : pos + entry.flat_length]
        factors, off = [], 0
        for s in entry.shapes:
            size = int(np.prod(s))
            factors.append(chunk[off : off + size].reshape(s).copy())
            off += size
        if len(factors) != 2:
            raise StructuralError(f"{entry.name}: a LoRA layer needs exactly two factors (A, B)")
        layers.append((entry.name, factors[0], factors[1]))
        pos += n_tok * layout.token_len
    return LoRACheckpoint(task_id, step_id, layers, layers[0][1].shape[0])
