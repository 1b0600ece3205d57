"""A forward pass expressed as blocks over named values, with incremental re-evaluation.

Re-evaluation after a single parameter changes only re-runs the blocks that
depend on it, which is what makes full finite-difference checks of the
detector affordable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

from ..autodiff import Tensor
from .layers import Module


@dataclass
class Block:
    name: str
    owners: tuple  # Modules or parameter Tensors the block reads
    reads: tuple[str, ...]
    writes: tuple[str, ...]
    fn: Callable[..., tuple]

    def parameters(self) -> list[Tensor]:
        out = []
        for owner in self.owners:
            out.extend(owner.parameters() if isinstance(owner, Module) else [owner])
        return out


def run_blocks(blocks: Sequence[Block], inputs: dict[str, Any]) -> dict[str, Any]:
    values = dict(inputs)
    for block in blocks:
        values.update(zip(block.writes, block.fn(*(values[k] for k in block.reads))))
    return values


class IncrementalRunner:
    """Caches every block's outputs from one full run.

    :meth:`rerun` recomputes only blocks that own a changed parameter or read
    a value recomputed earlier in the same pass; everything else is served
    from the cache.  The cache itself is never modified.
    """

    def __init__(self, blocks: Sequence[Block], inputs: dict[str, Any]):
        self.blocks = list(blocks)
        self.inputs = dict(inputs)
        self._owned = [{id(p) for p in b.parameters()} for b in self.blocks]
        values = dict(inputs)
        self._cache: list[tuple] = []
        for block in self.blocks:
            outs = tuple(block.fn(*(values[k] for k in block.reads)))
            self._cache.append(outs)
            values.update(zip(block.writes, outs))
        self.values = values

    def rerun(self, changed: Tensor) -> dict[str, Any]:
        key = id(changed)
        values = dict(self.inputs)
        dirty: set[str] = set()
        for block, owned, cached in zip(self.blocks, self._owned, self._cache):
            if key in owned or dirty.intersection(block.reads):
                outs = block.fn(*(values[k] for k in block.reads))
                dirty.update(block.writes)
            else:
                outs = cached
                dirty.difference_update(block.writes)
            values.update(zip(block.writes, outs))
        return values
