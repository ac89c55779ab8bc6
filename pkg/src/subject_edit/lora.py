"""Low-rank weight deltas: ``W' = W + scale * up @ down``."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class LoraDelta:
    down: torch.Tensor  # (rank, d_in), the "A" matrix
    up: torch.Tensor  # (d_out, rank), the "B" matrix, zero at init
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    @property
    def d_in(self) -> int:
        return self.down.shape[1]

    @property
    def d_out(self) -> int:
        return self.up.shape[0]

    def parameters(self) -> list[torch.Tensor]:
        return [self.down, self.up]

    def requires_grad_(self, flag: bool = True) -> "LoraDelta":
        self.down.requires_grad_(flag)
        self.up.requires_grad_(flag)
        return self

    def detach(self) -> "LoraDelta":
        return LoraDelta(self.down.detach().clone(), self.up.detach().clone(), self.scale)

    def negated(self) -> "LoraDelta":
        return LoraDelta(self.down, -self.up, self.scale)


LoraSet = dict[str, LoraDelta]


def init_lora(d_in: int, d_out: int, rank: int = 4, scale: float = 1.0, seed: int = 0,
              dtype: torch.dtype = torch.float32) -> LoraDelta:
    if not 1 <= rank <= min(d_in, d_out):
        raise ValueError(f"rank must lie in [1, min(d_in, d_out)] = [1, {min(d_in, d_out)}], got {rank}")
    gen = torch.Generator().manual_seed(seed)
    down = torch.randn(rank, d_in, generator=gen, dtype=torch.float64) / d_in**0.5
    up = torch.zeros(d_out, rank, dtype=torch.float64)
    return LoraDelta(down.to(dtype), up.to(dtype), float(scale))


def _check_dims(w, delta: LoraDelta) -> None:
    if tuple(w.shape) != (delta.d_out, delta.d_in):
        raise ValueError(
            f"base weight {tuple(w.shape)} does not match delta (d_out={delta.d_out}, d_in={delta.d_in})"
        )
    if delta.up.shape[1] != delta.rank:
        raise ValueError(f"up has {delta.up.shape[1]} columns but rank is {delta.rank}")


def apply_lora(x, w, delta: LoraDelta | None):
    """Runtime application ``W x + scale * B (A x)`` on the trailing axis of ``x``."""
    if delta is None:
        return x @ w.T
    _check_dims(w, delta)
    if x.shape[-1] != delta.d_in:
        raise ValueError(f"input has {x.shape[-1]} features, expected {delta.d_in}")
    return x @ w.T + delta.scale * ((x @ delta.down.T) @ delta.up.T)


def merge_lora(w, delta: LoraDelta):
    _check_dims(w, delta)
    return w + delta.scale * (delta.up @ delta.down)
