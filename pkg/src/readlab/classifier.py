"""Text encoder and (k+1)-class head with the three training losses.

The encoder mean-pools token embeddings over non-PAD positions and maps
them through two feed-forward layers to a d-dimensional feature. The head
adds one leaky-ReLU hidden layer and k+1 logits; index k is the fake
class. Losses:

  loss_labeled        -log( p_y / sum_{j<k} p_j )   on labeled data
  loss_unlabeled_real -log( 1 - p_fake )            on real (labeled+unlabeled) data
  loss_fake           -log( p_fake )                on generated data

all clamped by eps=1e-12 so saturated softmaxes never produce infinities.
The labeled loss renormalizes over the k task classes, which makes the
predicted task label invariant to how much mass sits on the fake class.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .corpus import PAD_ID
from .errors import ClassifierError
from .nn_utils import as_rng, default_init_, pad_token_batch

EPS = 1e-12


class Encoder(nn.Module):
    """Token embeddings, mean-pool over non-PAD positions, two FF layers."""

    def __init__(self, vocab_size: int, embed_dim: int = 64, d: int = 64,
                 pad_id: int = PAD_ID,
                 init_rng: int | torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.d = d
        self.pad_id = pad_id
        self.embedding = nn.Embedding(vocab_size, embed_dim)
        self.fc1 = nn.Linear(embed_dim, d)
        self.fc2 = nn.Linear(d, d)
        self.to(dtype)
        if init_rng is not None:
            default_init_(self, as_rng(init_rng))

    def forward(self, tokens_padded: torch.Tensor) -> torch.Tensor:
        mask = (tokens_padded != self.pad_id).to(self.fc1.weight.dtype)
        counts = mask.sum(dim=1)
        if (counts == 0).any():
            raise ClassifierError("cannot encode an all-PAD sequence")
        emb = self.embedding(tokens_padded) * mask.unsqueeze(-1)
        pooled = emb.sum(dim=1) / counts.unsqueeze(1)
        return self.fc2(torch.relu(self.fc1(pooled)))


class ClassifierHead(nn.Module):
    """Hidden layer of width d with leaky-ReLU, then k+1 logits."""

    def __init__(self, d: int, k: int,
                 init_rng: int | torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if k < 2:
            raise ClassifierError(f"need k >= 2 task classes, got {k}")
        self.d = d
        self.k = k
        self.fc = nn.Linear(d, d)
        self.act = nn.LeakyReLU()
        self.logits = nn.Linear(d, k + 1)
        self.to(dtype)
        if init_rng is not None:
            default_init_(self, as_rng(init_rng))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.d:
            raise ClassifierError(f"feature width {h.shape[-1]} != head width {self.d}")
        return self.logits(self.act(self.fc(h)))


@dataclass(frozen=True)
class ClassProbs:
    """Length-(k+1) probability vector; index k is the fake class."""

    probs: torch.Tensor
    k: int

    @property
    def p_fake(self) -> float:
        return float(self.probs[self.k].item())

    @property
    def predicted_label(self) -> int:
        """Argmax over the k task classes only; ties break to the lowest index."""
        return int(torch.argmax(self.probs[: self.k]).item())


def encode(encoder: Encoder, tokens: Sequence[int]) -> torch.Tensor:
    """Feature vector of one token sequence, dropout-free and deterministic."""
    if len(tokens) == 0:
        raise ClassifierError("cannot encode an empty token sequence")
    with torch.no_grad():
        return encoder(torch.tensor([list(tokens)], dtype=torch.long))[0]


def encode_batch(encoder: Encoder, token_lists: Sequence[Sequence[int]]) -> torch.Tensor:
    """Differentiable batched features, padding masked out of the pooling."""
    padded, _ = pad_token_batch(token_lists, encoder.pad_id)
    return encoder(padded)


def class_probabilities(head: ClassifierHead, h: torch.Tensor) -> torch.Tensor:
    """Softmax over k+1 logits for a (B, d) or (d,) feature tensor."""
    return torch.softmax(head(h), dim=-1)


def classify(head: ClassifierHead, h: torch.Tensor) -> ClassProbs:
    if h.dim() != 1:
        raise ClassifierError(f"classify expects a single feature vector, got {tuple(h.shape)}")
    with torch.no_grad():
        return ClassProbs(probs=class_probabilities(head, h), k=head.k)


def _as_batch(probs: torch.Tensor | ClassProbs) -> torch.Tensor:
    if isinstance(probs, ClassProbs):
        probs = probs.probs
    return probs.unsqueeze(0) if probs.dim() == 1 else probs


def loss_labeled(probs: torch.Tensor | ClassProbs, y: int | torch.Tensor) -> torch.Tensor:
    """-log p(y | task classes): renormalized over the first k entries.

    k is the probability width minus one (the trailing entry is the fake
    class and never a valid label).
    """
    p = _as_batch(probs)
    k = p.shape[1] - 1
    y_t = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    if (y_t < 0).any() or (y_t >= k).any():
        raise ClassifierError(f"labels must lie in 0..{k - 1}")
    task_mass = p[:, :k].sum(dim=1).clamp_min(EPS)
    p_y = p.gather(1, y_t.unsqueeze(1)).squeeze(1).clamp_min(EPS)
    return -torch.log(p_y / task_mass).mean()


def loss_unlabeled_real(probs: torch.Tensor | ClassProbs) -> torch.Tensor:
    """-log(1 - p_fake) on real data; zero only when no fake mass remains."""
    p = _as_batch(probs)
    return -torch.log((1.0 - p[:, -1]).clamp_min(EPS)).mean()


def loss_fake(probs: torch.Tensor | ClassProbs) -> torch.Tensor:
    """-log p_fake on generated data; zero only at certain fake."""
    p = _as_batch(probs)
    return -torch.log(p[:, -1].clamp_min(EPS)).mean()


def classifier_loss(encoder: Encoder, head: ClassifierHead,
                    batch_labeled: tuple[Sequence[Sequence[int]], Sequence[int]],
                    batch_real: Sequence[Sequence[int]] | None,
                    batch_fake: Sequence[Sequence[int]] | torch.Tensor | None,
                    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
                    ) -> tuple[torch.Tensor, dict]:
    """w_l*L_l + w_u*L_u + w_f*L_f with a per-loss breakdown.

    ``batch_real``/``batch_fake`` may be empty or None; their losses are then
    skipped entirely (the plain-supervised variant trains on L_l alone).
    Fake inputs may be token sequences or a precomputed feature tensor; the
    latter is detached so gradients stop at the classifier.
    """
    token_lists, labels = batch_labeled
    if len(token_lists) == 0:
        raise ClassifierError("labeled batch must be non-empty")

    probs_l = class_probabilities(head, encode_batch(encoder, token_lists))
    l_l = loss_labeled(probs_l, torch.tensor(list(labels)))
    breakdown = {"loss_l": float(l_l.item()), "loss_u": None, "loss_f": None}
    total = loss_weights[0] * l_l

    if batch_real is not None and len(batch_real) > 0:
        probs_u = class_probabilities(head, encode_batch(encoder, batch_real))
        l_u = loss_unlabeled_real(probs_u)
        breakdown["loss_u"] = float(l_u.item())
        total = total + loss_weights[1] * l_u

    if batch_fake is not None and len(batch_fake) > 0:
        if isinstance(batch_fake, torch.Tensor):
            feats = batch_fake.detach().to(encoder.fc1.weight.dtype)
        else:
            feats = encode_batch(encoder, batch_fake)
        probs_f = class_probabilities(head, feats)
        l_f = loss_fake(probs_f)
        breakdown["loss_f"] = float(l_f.item())
        total = total + loss_weights[2] * l_f

    if not torch.isfinite(total):
        raise ClassifierError(f"non-finite classifier loss: {breakdown}")
    breakdown["loss_total"] = float(total.item())
    return total, breakdown


def classifier_step(encoder: Encoder, head: ClassifierHead,
                    batch_labeled: tuple[Sequence[Sequence[int]], Sequence[int]],
                    batch_real: Sequence[Sequence[int]] | None,
                    batch_fake: Sequence[Sequence[int]] | torch.Tensor | None,
                    lr: float = 5e-5,
                    optimizer: torch.optim.Optimizer | None = None,
                    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
                    ) -> dict:
    """One descent step on the combined loss through both encoder and head."""
    if optimizer is None:
        params = list(encoder.parameters()) + list(head.parameters())
        optimizer = torch.optim.AdamW(params, lr=lr, weight_decay=0.0)
    total, breakdown = classifier_loss(encoder, head, batch_labeled, batch_real,
                                       batch_fake, loss_weights)
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return breakdown
