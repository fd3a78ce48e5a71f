"""Finite-difference verification of every analytic gradient path.

Each component builds a double-precision micro configuration, evaluates
its training loss, and compares the autograd gradient against central
finite differences (step 1e-4) coordinate by coordinate. The reported
number is the vector-level relative error

    || g_analytic - g_fd ||_inf / max(||g_analytic||_inf, ||g_fd||_inf)

which must stay below 1e-4 for the check to pass.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

from .classifier import ClassifierHead, Encoder, classifier_loss
from .generator import TokenGenerator, Trajectory, sequence_log_probs
from .nn_utils import length_mask, make_rng, pad_token_batch, uniform_init_
from .reward import RewardNet, irl_loss

FD_STEP = 1e-4
TOLERANCE = 1e-4
COMPONENTS = ("generator", "reward", "classifier")


def _analytic_gradient(loss_fn: Callable[[], torch.Tensor],
                       params: Sequence[torch.Tensor]) -> np.ndarray:
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss_fn().backward()
    return np.concatenate([
        (p.grad if p.grad is not None else torch.zeros_like(p)).detach().numpy().ravel()
        for p in params])


def _fd_gradient(loss_fn: Callable[[], torch.Tensor],
                 params: Sequence[torch.Tensor], step: float = FD_STEP) -> np.ndarray:
    grads = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            g = np.zeros(flat.numel())
            for i in range(flat.numel()):
                orig = float(flat[i].item())
                flat[i] = orig + step
                up = float(loss_fn().item())
                flat[i] = orig - step
                down = float(loss_fn().item())
                flat[i] = orig
                g[i] = (up - down) / (2.0 * step)
            grads.append(g)
    return np.concatenate(grads)


def relative_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(), np.abs(fd).max(), 1e-12)
    return float(np.abs(analytic - fd).max() / scale)


def _compare(loss_fn: Callable[[], torch.Tensor], module: torch.nn.Module) -> float:
    params = list(module.parameters())
    analytic = _analytic_gradient(loss_fn, params)
    fd = _fd_gradient(loss_fn, params)
    return relative_error(analytic, fd)


def check_generator(seed: int = 7) -> float:
    """Teacher-forced sequence log-likelihood through embedding, LSTM and FF stack."""
    gen = TokenGenerator(vocab_size=5, embed_dim=3, state_dim=4, ff_width=4,
                         ff_layers=4, dropout_p=0.0, dtype=torch.float64)
    uniform_init_(gen, make_rng(seed), -0.5, 0.5)
    token_lists = [[1, 4, 2, 3], [4, 1, 3]]
    padded, lengths = pad_token_batch(token_lists, gen.pad_id)
    mask = length_mask(lengths, padded.shape[1]).to(torch.float64)

    def loss_fn():
        step_logp, _, _ = sequence_log_probs(gen, padded)
        return -(step_logp * mask).sum()

    return _compare(loss_fn, gen)


def check_reward(seed: int = 11) -> float:
    """IRL objective on one real and one generated trajectory (unit weight)."""
    net = RewardNet(vocab_size=5, state_dim=3, embed_dim=2, hidden=3, layers=3,
                    dropout_p=0.0, dtype=torch.float64)
    uniform_init_(net, make_rng(seed), -0.5, 0.5)
    rng = make_rng(seed + 1)
    real = Trajectory(tokens=(1, 2, 3), states=torch.randn(3, 3, generator=rng,
                      dtype=torch.float64), step_log_probs=(-1.0, -1.1, -0.2),
                      finished=True)
    gen = Trajectory(tokens=(4, 2), states=torch.randn(2, 3, generator=rng,
                     dtype=torch.float64), step_log_probs=(-0.9, -1.3),
                     finished=False)

    def loss_fn():
        loss, _ = irl_loss(net, [real], [gen], [gen.log_prob], [0.2], [0.8], mode="READ")
        return loss

    return _compare(loss_fn, net)


class _EncoderHead(torch.nn.Module):
    def __init__(self, encoder: Encoder, head: ClassifierHead):
        super().__init__()
        self.encoder = encoder
        self.head = head


def check_classifier(seed: int = 13) -> float:
    """Combined L_l + L_u + L_f through the encoder and the (k+1)-class head."""
    encoder = Encoder(vocab_size=6, embed_dim=3, d=4, dtype=torch.float64)
    head = ClassifierHead(d=4, k=2, dtype=torch.float64)
    both = _EncoderHead(encoder, head)
    uniform_init_(both, make_rng(seed), -0.5, 0.5)
    batch_l = ([[4, 5, 3], [2, 4, 3]], [0, 1])
    batch_real = [[5, 5, 3], [4, 2, 3]]
    batch_fake = [[2, 2, 3], [5, 4, 3]]

    def loss_fn():
        total, _ = classifier_loss(encoder, head, batch_l, batch_real, batch_fake)
        return total

    return _compare(loss_fn, both)


_CHECKS = {"generator": check_generator, "reward": check_reward,
           "classifier": check_classifier}


def run_gradcheck(component: str = "all", corrupt: str | None = None) -> dict[str, float]:
    """Run the finite-difference suites; returns worst relative error per component.

    ``corrupt`` names a component whose reported error is poisoned; it exists
    only as a negative-control hook for tests of the CLI exit code.
    """
    names = list(COMPONENTS) if component == "all" else [component]
    for name in names:
        if name not in _CHECKS:
            raise ValueError(f"unknown component {name!r}; valid: {', '.join(COMPONENTS)}")
    results = {}
    for name in names:
        err = _CHECKS[name]()
        if corrupt == name:
            err += 1.0
        results[name] = err
    return results
