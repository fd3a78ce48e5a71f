"""Small shared utilities: seeded RNG streams, init, dropout, padding.

All stochastic operations in this package draw from explicit
``torch.Generator`` objects so that runs are bit-reproducible and
checkpoint-resumable. ``torch.nn.Dropout`` cannot take a generator, so
dropout is applied functionally via :func:`dropout`.
"""

from __future__ import annotations

import hashlib
from typing import Iterable, Sequence

import torch

INIT_RANGE = 0.08


def stream_seed(master_seed: int, label: str) -> int:
    """Derive a per-component seed from the master seed and a fixed label.

    Stable across processes and Python versions (sha256-based, not hash()).
    """
    digest = hashlib.sha256(f"{master_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def make_rng(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(seed)
    return g


def as_rng(rng: int | torch.Generator) -> torch.Generator:
    """Accept either a seed or an existing generator."""
    if isinstance(rng, torch.Generator):
        return rng
    return make_rng(int(rng))


def uniform_init_(module: torch.nn.Module, rng: torch.Generator,
                  lo: float = -INIT_RANGE, hi: float = INIT_RANGE) -> None:
    """Initialise every parameter of ``module`` from U(lo, hi) in-place.

    Parameter iteration order is the module registration order, so the same
    rng state always produces the same initialisation.
    """
    with torch.no_grad():
        for p in module.parameters():
            p.uniform_(lo, hi, generator=rng)


def default_init_(module: torch.nn.Module, rng: torch.Generator) -> None:
    """Seeded default initialisation for this package's networks.

    Embedding and recurrent weights use the classic U(-0.08, 0.08); Linear
    weights are fan-in scaled (U(+-sqrt(6/fan_in))) because the flat range
    starves deep narrow ReLU stacks of both signal and gradient. Biases stay
    in the classic range.
    """
    import math

    with torch.no_grad():
        for mod in module.modules():
            if isinstance(mod, torch.nn.Linear):
                bound = math.sqrt(6.0 / mod.in_features)
                mod.weight.uniform_(-bound, bound, generator=rng)
                if mod.bias is not None:
                    mod.bias.uniform_(-INIT_RANGE, INIT_RANGE, generator=rng)
            else:
                for p in mod.parameters(recurse=False):
                    p.uniform_(-INIT_RANGE, INIT_RANGE, generator=rng)


def dropout(x: torch.Tensor, p: float, rng: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator.

    ``rng=None`` means evaluation mode: the input is returned unchanged.
    """
    if rng is None or p <= 0.0:
        return x
    keep = 1.0 - p
    mask = (torch.rand(x.shape, generator=rng, dtype=x.dtype) < keep).to(x.dtype)
    return x * mask / keep


def pad_token_batch(token_lists: Sequence[Sequence[int]], pad_id: int,
                    ) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad variable-length id sequences into (B, L) long tensor + length vector."""
    if not token_lists:
        raise ValueError("empty token batch")
    lengths = torch.tensor([len(t) for t in token_lists], dtype=torch.long)
    max_len = int(lengths.max().item())
    out = torch.full((len(token_lists), max_len), pad_id, dtype=torch.long)
    for i, toks in enumerate(token_lists):
        out[i, : len(toks)] = torch.tensor(list(toks), dtype=torch.long)
    return out, lengths


def length_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    """(B, max_len) float mask with 1.0 at positions < length."""
    ar = torch.arange(max_len).unsqueeze(0)
    return (ar < lengths.unsqueeze(1)).to(torch.get_default_dtype())


def global_grad_norm(params: Iterable[torch.Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum().item())
    return total ** 0.5
