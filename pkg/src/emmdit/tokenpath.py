"""Multi-path token compression and reconstruction.

Each branch with ratio ``r`` merges every non-overlapping ``r x r`` window
of the token grid into one token along the channel axis and maps it back
to the model width with a small MLP. Branch outputs are concatenated along
the sequence axis (lowest ratio first) and processed jointly. The
reconstructor reverses each branch (MLP to ``r*r*C`` channels, then the
inverse window rearrangement), concatenates the branch reconstructions and
the skip tokens channel-wise and fuses them back to ``C`` with a third MLP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigError, ShapeError
from .numcore import ops
from .numcore.layers import MLP, Module, ParamFactory
from .numcore.tensor import Tensor


@dataclass
class TokenGrid:
    """Row-major token sequence ``[B, H*W, C]`` with its spatial extent."""

    tokens: Tensor
    height: int
    width: int

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] != self.height * self.width:
            raise ShapeError(
                f"TokenGrid: tokens {self.tokens.shape} do not match a {self.height}x{self.width} grid"
            )

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def channels(self) -> int:
        return self.tokens.shape[2]

    @property
    def length(self) -> int:
        return self.height * self.width


def window_merge(g: TokenGrid, r: int) -> Tensor:
    """``[B, H*W, C] -> [B, (H/r)*(W/r), r*r*C]``; window tokens concatenated in row-major order."""
    if g.height % r or g.width % r:
        raise ConfigError(f"window_merge: {g.height}x{g.width} grid is not divisible by ratio {r}")
    b, c = g.batch, g.channels
    hh, ww = g.height // r, g.width // r
    x = ops.reshape(g.tokens, (b, hh, r, ww, r, c))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (b, hh * ww, r * r * c))


def window_unmerge(x: Tensor, r: int, height: int, width: int) -> TokenGrid:
    """Inverse of :func:`window_merge` for a target ``height x width`` grid."""
    if height % r or width % r:
        raise ConfigError(f"window_unmerge: {height}x{width} grid is not divisible by ratio {r}")
    b, n, rc = x.shape
    hh, ww = height // r, width // r
    if n != hh * ww or rc % (r * r):
        raise ShapeError(f"window_unmerge: {x.shape} cannot be unmerged into {height}x{width} with r={r}")
    c = rc // (r * r)
    y = ops.reshape(x, (b, hh, ww, r, r, c))
    y = ops.transpose(y, (0, 1, 3, 2, 4, 5))
    return TokenGrid(ops.reshape(y, (b, height * width, c)), height, width)


def compress_branch(g: TokenGrid, r: int, mlp: MLP) -> TokenGrid:
    return TokenGrid(mlp(window_merge(g, r)), g.height // r, g.width // r)


def compress(g: TokenGrid, branches: Sequence[tuple[int, MLP]]) -> list[TokenGrid]:
    """Apply every ``(ratio, mlp)`` branch to the same grid."""
    for r, _ in branches:
        if g.height % r or g.width % r:
            raise ConfigError(f"compress: {g.height}x{g.width} grid is not divisible by ratio {r}")
    return [compress_branch(g, r, mlp) for r, mlp in branches]


def joint_tokens(grids: Sequence[TokenGrid]) -> Tensor:
    """Concatenate compressed token sets along the sequence axis, in branch order."""
    widths = {grid.channels for grid in grids}
    if len(widths) != 1:
        raise ShapeError(f"joint_tokens: channel widths differ across branches: {sorted(widths)}")
    if len({grid.batch for grid in grids}) != 1:
        raise ShapeError("joint_tokens: batch sizes differ across branches")
    if len(grids) == 1:
        return grids[0].tokens
    return ops.concat([grid.tokens for grid in grids], axis=1)


def split_joint(joint: Tensor, ratios: Sequence[int], height: int, width: int) -> list[Tensor]:
    sizes = [(height // r) * (width // r) for r in ratios]
    if joint.shape[1] != sum(sizes):
        raise ShapeError(
            f"joint sequence of length {joint.shape[1]} does not match ratios {list(ratios)} "
            f"on a {height}x{width} grid (expected {sum(sizes)})"
        )
    if len(sizes) == 1:
        return [joint]
    return ops.split(joint, sizes, axis=1)


class Reconstructor(Module):
    """Per-branch upsampling MLPs plus the fusing MLP."""

    def __init__(
        self,
        width: int,
        ratios: Sequence[int],
        init: ParamFactory,
        hidden: int | None = None,
        fuse_hidden: int | None = None,
        use_skip: bool = True,
    ):
        self.ratios = tuple(ratios)
        self.use_skip = use_skip
        hidden = hidden or width
        for r in self.ratios:
            setattr(self, f"up{r}", MLP(width, hidden, r * r * width, init))
        parts = len(self.ratios) + int(use_skip)
        self.fuse = MLP(parts * width, fuse_hidden or width, width, init)

    def upsampler(self, r: int) -> MLP:
        return getattr(self, f"up{r}")


def upsample_branch(tokens: Tensor, r: int, mlp: MLP, height: int, width: int) -> Tensor:
    return window_unmerge(mlp(tokens), r, height, width).tokens


def reconstruct(joint: Tensor, skip: TokenGrid, w: Reconstructor) -> TokenGrid:
    """Recover the ``skip`` geometry from the joint compressed sequence."""
    h, wd = skip.height, skip.width
    if joint.shape[0] != skip.batch or joint.shape[2] != skip.channels:
        raise ShapeError(f"reconstruct: joint {joint.shape} incompatible with skip {skip.tokens.shape}")
    pieces = split_joint(joint, w.ratios, h, wd)
    parts = [upsample_branch(p, r, w.upsampler(r), h, wd) for p, r in zip(pieces, w.ratios)]
    if w.use_skip:
        parts.append(skip.tokens)
    fused_in = parts[0] if len(parts) == 1 else ops.concat(parts, axis=-1)
    return TokenGrid(w.fuse(fused_in), h, wd)


def joint_length(height: int, width: int, ratios: Sequence[int]) -> int:
    return sum((height // r) * (width // r) for r in ratios)
