"""Per-step reward approximator and its IRL training update.

The reward net scores (state, action, fake-probability) triples:
``concat(s_t, action_embedding(a_t), p_fake)`` through an MLP to one
scalar. The fake-probability input column exists in every mode; in
``D_READ`` mode the input value is forced to zero instead of removing
the weights, so the two modes share one parameterization.

Reward training maximizes ``E_real[R(tau)] - log Z`` with the partition
gradient estimated by self-normalized importance sampling over generator
samples, weights proportional to exp(R(tau_i) - log q(tau_i)).
"""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .errors import RewardError
from .generator import Trajectory
from .nn_utils import as_rng, default_init_, dropout

MODES = ("READ", "D_READ")
LOG_WEIGHT_CLAMP = 20.0


class RewardNet(nn.Module):
    """MLP reward over (state, own action embedding, fake-probability)."""

    def __init__(self, vocab_size: int, state_dim: int = 128, embed_dim: int = 128,
                 hidden: int = 128, layers: int = 3, dropout_p: float = 0.2,
                 init_rng: int | torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.state_dim = state_dim
        self.dropout_p = dropout_p
        self.action_embedding = nn.Embedding(vocab_size, embed_dim)
        widths = [state_dim + embed_dim + 1] + [hidden] * layers
        self.hidden_layers = nn.ModuleList(
            nn.Linear(widths[i], widths[i + 1]) for i in range(layers))
        self.out_layer = nn.Linear(widths[-1], 1)
        self.to(dtype)
        if init_rng is not None:
            default_init_(self, as_rng(init_rng))

    def forward(self, states: torch.Tensor, action_ids: torch.Tensor,
                p_fake: torch.Tensor, mode: str = "READ",
                dropout_rng: torch.Generator | None = None) -> torch.Tensor:
        """Per-step rewards for (..., state_dim) states and matching action ids.

        ``p_fake`` must broadcast against the leading dimensions of
        ``action_ids``; in D_READ mode its value is replaced by zero.
        """
        if mode not in MODES:
            raise RewardError(f"mode must be one of {MODES}, got {mode!r}")
        if states.shape[-1] != self.state_dim:
            raise RewardError(
                f"state width {states.shape[-1]} != reward net state_dim {self.state_dim}")
        p = torch.as_tensor(p_fake, dtype=states.dtype)
        p = p.expand(action_ids.shape) if p.shape != action_ids.shape else p
        if mode == "D_READ":
            p = torch.zeros_like(p)
        inp = torch.cat([states, self.action_embedding(action_ids), p.unsqueeze(-1)], dim=-1)
        h = inp
        for layer in self.hidden_layers:
            h = dropout(torch.relu(layer(h)), self.dropout_p, dropout_rng)
        return self.out_layer(h).squeeze(-1)

    def check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise RewardError(f"non-finite reward parameter: {name}")


def _validate_p(p_fake: float) -> float:
    p = float(p_fake)
    if not 0.0 <= p <= 1.0:
        raise RewardError(f"p_fake must lie in [0, 1], got {p}")
    return p


def step_reward(net: RewardNet, state: torch.Tensor, action: int, p_fake: float,
                mode: str = "READ") -> float:
    """Evaluate one step's reward with dropout disabled."""
    p = _validate_p(p_fake)
    state = torch.as_tensor(state, dtype=net.out_layer.weight.dtype)
    if state.dim() != 1:
        raise RewardError(f"state must be a vector, got shape {tuple(state.shape)}")
    with torch.no_grad():
        value = net(state.unsqueeze(0), torch.tensor([int(action)]),
                    torch.tensor([p], dtype=state.dtype), mode=mode)
    return float(value.item())


def batch_step_rewards(net: RewardNet, trajectories: Sequence[Trajectory],
                       p_fakes: Sequence[float], mode: str = "READ",
                       dropout_rng: torch.Generator | None = None,
                       ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable batched rewards over active steps.

    Returns (per_step (B, L), active_mask (B, L), totals (B,)). Steps at or
    past each trajectory's active length (the EOS step and padding) carry
    zero reward and a zero mask.
    """
    if len(trajectories) != len(p_fakes):
        raise RewardError("trajectories and p_fakes length mismatch")
    dtype = net.out_layer.weight.dtype
    max_len = max(t.length for t in trajectories)
    bsz = len(trajectories)
    states = torch.zeros(bsz, max_len, net.state_dim, dtype=dtype)
    actions = torch.zeros(bsz, max_len, dtype=torch.long)
    mask = torch.zeros(bsz, max_len, dtype=dtype)
    p_col = torch.zeros(bsz, max_len, dtype=dtype)
    for i, (traj, p) in enumerate(zip(trajectories, p_fakes)):
        p = _validate_p(p)
        t_i = traj.length
        if traj.states.shape != (t_i, net.state_dim):
            raise RewardError(
                f"trajectory states shape {tuple(traj.states.shape)} does not match "
                f"(length={t_i}, state_dim={net.state_dim})")
        states[i, :t_i] = traj.states.to(dtype)
        actions[i, :t_i] = torch.tensor(traj.tokens, dtype=torch.long)
        mask[i, : traj.active_length] = 1.0
        p_col[i, :t_i] = p
    per_step = net(states, actions, p_col, mode=mode, dropout_rng=dropout_rng) * mask
    return per_step, mask, per_step.sum(dim=1)


def trajectory_reward(net: RewardNet, trajectory: Trajectory, p_fake: float,
                      mode: str = "READ") -> tuple[float, list[float]]:
    """Total reward and the per-step vector for one trajectory (evaluation).

    The per-step vector has the trajectory's full length with 0.0 at the
    final EOS step, ready to feed the policy gradient's reward-to-go.
    """
    with torch.no_grad():
        per_step, _, totals = batch_step_rewards(net, [trajectory], [p_fake], mode=mode)
    return float(totals[0].item()), [float(v) for v in per_step[0, : trajectory.length]]


def normalized_importance_weights(log_weights: torch.Tensor) -> torch.Tensor:
    """Self-normalized weights from log space, clamped to +-LOG_WEIGHT_CLAMP.

    Non-finite log weights (the only way the normalizer can degenerate once
    clamping is in place) raise RewardError.
    """
    if not torch.isfinite(log_weights).all():
        raise RewardError("degenerate importance weights")
    lw = torch.clamp(log_weights, -LOG_WEIGHT_CLAMP, LOG_WEIGHT_CLAMP)
    unnorm = torch.exp(lw - lw.max())
    total = unnorm.sum()
    if not torch.isfinite(total) or float(total.item()) <= 0.0:
        raise RewardError("degenerate importance weights")
    return unnorm / total


def irl_loss(net: RewardNet, real_trajectories: Sequence[Trajectory],
             gen_trajectories: Sequence[Trajectory],
             gen_log_probs: Sequence[float],
             p_fakes_real: Sequence[float], p_fakes_gen: Sequence[float],
             mode: str = "READ",
             dropout_rng: torch.Generator | None = None,
             reward_l2: float = 0.0,
             ) -> tuple[torch.Tensor, dict]:
    """Negated maximum-entropy IRL objective, importance weights held constant.

    loss = -( mean_real R  -  sum_i w_i R(tau_i_gen) ), with w_i proportional
    to exp(clamp(R(tau_i) - log q(tau_i), +-20)); the weights are detached so
    autograd yields exactly the self-normalized estimate of -(grad E_real[R]
    - grad log Z).

    ``reward_l2`` adds a per-step magnitude penalty. The raw objective keeps
    growing once the two sides separate; the penalty gives reward values a
    finite equilibrium, which desk-scale adversarial loops need.
    """
    if not real_trajectories or not gen_trajectories:
        raise RewardError("need at least one real and one generated trajectory")
    if len(gen_log_probs) != len(gen_trajectories):
        raise RewardError("gen_log_probs must align with gen_trajectories")
    dtype = net.out_layer.weight.dtype
    steps_real, mask_real, totals_real = batch_step_rewards(
        net, real_trajectories, p_fakes_real, mode=mode, dropout_rng=dropout_rng)
    steps_gen, mask_gen, totals_gen = batch_step_rewards(
        net, gen_trajectories, p_fakes_gen, mode=mode, dropout_rng=dropout_rng)
    logq = torch.as_tensor(list(gen_log_probs), dtype=dtype)
    weights = normalized_importance_weights(totals_gen.detach() - logq)
    loss = -(totals_real.mean() - (weights * totals_gen).sum())
    if reward_l2 > 0.0:
        # trajectory-total penalty: equilibrium |R(tau)| ~ 1/reward_l2
        loss = loss + reward_l2 * 0.5 * (totals_real.pow(2).mean()
                                         + totals_gen.pow(2).mean())
    diag = {
        "mean_reward_real": float(totals_real.mean().item()),
        "mean_reward_gen": float(totals_gen.mean().item()),
        "importance_ess": float(1.0 / (weights.pow(2).sum().item())),
    }
    return loss, diag


def irl_update(net: RewardNet, real_trajectories: Sequence[Trajectory],
               gen_trajectories: Sequence[Trajectory],
               gen_log_probs: Sequence[float],
               p_fakes_real: Sequence[float], p_fakes_gen: Sequence[float],
               lr: float = 4e-3, mode: str = "READ",
               optimizer: torch.optim.Optimizer | None = None,
               dropout_rng: torch.Generator | None = None,
               reward_l2: float = 0.0, max_grad_norm: float = 5.0) -> dict:
    """One ascent step on E_real[R(tau)] - log Z (see :func:`irl_loss`).

    Returns diagnostics: mean rewards on both sides and the effective sample
    size of the importance weights.
    """
    if optimizer is None:
        optimizer = torch.optim.AdamW(net.parameters(), lr=lr, weight_decay=0.0)
    loss, diag = irl_loss(net, real_trajectories, gen_trajectories, gen_log_probs,
                          p_fakes_real, p_fakes_gen, mode=mode, dropout_rng=dropout_rng,
                          reward_l2=reward_l2)
    optimizer.zero_grad()
    loss.backward()
    nn.utils.clip_grad_norm_(net.parameters(), max_grad_norm)
    optimizer.step()
    net.check_finite()
    return diag
