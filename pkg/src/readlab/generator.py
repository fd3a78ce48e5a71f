"""Autoregressive token-sequence policy.

The generator is an embedding + single-layer LSTM + a stack of
feed-forward layers ending in vocabulary-sized logits. It supports
seeded trajectory sampling, teacher-forced scoring, MLE pretraining and
an entropy-regularized policy-gradient update.

Conventions:
  * A trajectory step t pairs the recurrent state ``s_t`` (the LSTM hidden
    vector from which the step's logits were computed) with the chosen
    action ``a_t`` (the sampled token, so ``tokens == actions``).
  * A trajectory ends either by emitting EOS (``finished=True``, the EOS
    token is the last entry) or by reaching ``max_len``.
  * ``step_log_probs`` always record the temperature-1.0 policy
    log-probability of the chosen action, even when sampling at a
    different temperature, so they match :func:`trajectory_log_prob`.
  * Dropout is active only during MLE pretraining. Sampling, scoring and
    the policy-gradient path run the deterministic network, which keeps
    the REINFORCE estimator an unbiased gradient of the sampled policy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .corpus import BOS_ID, EOS_ID, PAD_ID
from .errors import GeneratorError
from .nn_utils import (as_rng, default_init_, dropout, global_grad_norm, length_mask,
                       pad_token_batch)


@dataclass
class Trajectory:
    """One generated (or teacher-forced) token sequence with per-step data."""

    tokens: tuple[int, ...]
    states: torch.Tensor                 # (T, state_dim), detached
    step_log_probs: tuple[float, ...]
    finished: bool

    @property
    def actions(self) -> tuple[int, ...]:
        """Actions are the chosen next-token ids, identical to ``tokens``."""
        return self.tokens

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def active_length(self) -> int:
        """Steps that carry reward: the final EOS step is excluded."""
        return self.length - 1 if self.finished else self.length

    @property
    def log_prob(self) -> float:
        return float(sum(self.step_log_probs))


@dataclass
class RunningBaseline:
    """Exponentially averaged scalar baseline for REINFORCE."""

    value: float = 0.0
    decay: float = 0.9

    def update(self, mean_return: float) -> None:
        self.value = self.decay * self.value + (1.0 - self.decay) * mean_return


class TokenGenerator(nn.Module):
    """Embedding -> LSTM -> feed-forward stack -> vocabulary logits."""

    def __init__(self, vocab_size: int, embed_dim: int = 128, state_dim: int = 128,
                 ff_width: int = 128, ff_layers: int = 4, dropout_p: float = 0.1,
                 pad_id: int = PAD_ID, bos_id: int = BOS_ID, eos_id: int = EOS_ID,
                 init_rng: int | torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if vocab_size < 2:
            raise GeneratorError(f"vocab_size must be >= 2, got {vocab_size}")
        for name, idx in (("pad_id", pad_id), ("bos_id", bos_id), ("eos_id", eos_id)):
            if not 0 <= idx < vocab_size:
                raise GeneratorError(f"{name}={idx} outside vocabulary of size {vocab_size}")
        self.vocab_size = vocab_size
        self.state_dim = state_dim
        self.dropout_p = dropout_p
        self.pad_id, self.bos_id, self.eos_id = pad_id, bos_id, eos_id
        self.embedding = nn.Embedding(vocab_size, embed_dim)
        self.lstm = nn.LSTM(embed_dim, state_dim, batch_first=True)
        widths = [state_dim] + [ff_width] * ff_layers
        self.hidden_layers = nn.ModuleList(
            nn.Linear(widths[i], widths[i + 1]) for i in range(ff_layers))
        self.logit_layer = nn.Linear(widths[-1], vocab_size)
        self.to(dtype)
        if init_rng is not None:
            default_init_(self, as_rng(init_rng))

    def logits_from_states(self, states: torch.Tensor,
                           dropout_rng: torch.Generator | None = None) -> torch.Tensor:
        h = states
        for layer in self.hidden_layers:
            h = dropout(torch.relu(layer(h)), self.dropout_p, dropout_rng)
        return self.logit_layer(h)

    def check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise GeneratorError(f"non-finite generator parameter: {name}")


def _validate_tokens(gen: TokenGenerator, tokens: Sequence[int]) -> None:
    if len(tokens) == 0:
        raise GeneratorError("empty token sequence")
    for t in tokens:
        if not 0 <= int(t) < gen.vocab_size:
            raise GeneratorError(
                f"token id {t} out of range for vocabulary of size {gen.vocab_size}")


def sequence_log_probs(gen: TokenGenerator, tokens_padded: torch.Tensor,
                       dropout_rng: torch.Generator | None = None,
                       ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Teacher-forced per-step log-probabilities for a padded (B, L) batch.

    Returns (step_log_probs (B, L), states (B, L, state_dim), logits).
    Positions at or beyond each row's length are garbage and must be masked
    by the caller.
    """
    bsz = tokens_padded.shape[0]
    bos = torch.full((bsz, 1), gen.bos_id, dtype=torch.long)
    inputs = torch.cat([bos, tokens_padded[:, :-1]], dim=1)
    states, _ = gen.lstm(gen.embedding(inputs))
    logits = gen.logits_from_states(states, dropout_rng)
    logp = torch.log_softmax(logits, dim=-1)
    step_logp = logp.gather(2, tokens_padded.unsqueeze(2)).squeeze(2)
    return step_logp, states, logits


def sample_trajectories(gen: TokenGenerator, n: int, max_len: int,
                        rng: int | torch.Generator, temperature: float = 1.0,
                        ) -> list[Trajectory]:
    """Sample ``n`` trajectories from BOS and the zero recurrent state.

    Sampling is categorical from softmax(logits / temperature) and stops at
    EOS or ``max_len``. Deterministic per rng state; dropout is disabled.
    """
    if n < 1 or max_len < 1:
        raise GeneratorError(f"need n >= 1 and max_len >= 1, got n={n}, max_len={max_len}")
    if temperature <= 0:
        raise GeneratorError(f"temperature must be > 0, got {temperature}")
    rng = as_rng(rng)
    dtype = gen.logit_layer.weight.dtype
    with torch.no_grad():
        x = torch.full((n,), gen.bos_id, dtype=torch.long)
        h = torch.zeros(1, n, gen.state_dim, dtype=dtype)
        c = torch.zeros(1, n, gen.state_dim, dtype=dtype)
        lengths = torch.full((n,), max_len, dtype=torch.long)
        finished = torch.zeros(n, dtype=torch.bool)
        tok_cols, state_cols, logp_cols = [], [], []
        for step in range(max_len):
            out, (h, c) = gen.lstm(gen.embedding(x).unsqueeze(1), (h, c))
            s = out[:, 0, :]
            logits = gen.logits_from_states(s)
            sample_logits = logits if temperature == 1.0 else logits / temperature
            probs = torch.softmax(sample_logits, dim=-1)
            a = torch.multinomial(probs, 1, generator=rng).squeeze(1)
            logp = torch.log_softmax(logits, dim=-1).gather(1, a.unsqueeze(1)).squeeze(1)
            tok_cols.append(a)
            state_cols.append(s)
            logp_cols.append(logp)
            newly = (~finished) & (a == gen.eos_id)
            lengths[newly] = step + 1
            finished |= newly
            if bool(finished.all()):
                break
            x = a
        toks = torch.stack(tok_cols, dim=1)
        states = torch.stack(state_cols, dim=1)
        logps = torch.stack(logp_cols, dim=1)
    out_trajs = []
    for i in range(n):
        t_i = int(lengths[i].item())
        out_trajs.append(Trajectory(
            tokens=tuple(int(v) for v in toks[i, :t_i]),
            states=states[i, :t_i].clone(),
            step_log_probs=tuple(float(v) for v in logps[i, :t_i]),
            finished=bool(finished[i]),
        ))
    return out_trajs


def trajectory_log_prob(gen: TokenGenerator, tokens: Sequence[int]) -> float:
    """Teacher-forced log q(tokens) = sum_t log q(x_t | x_<t), dropout disabled."""
    _validate_tokens(gen, tokens)
    padded = torch.tensor([list(tokens)], dtype=torch.long)
    with torch.no_grad():
        step_logp, _, _ = sequence_log_probs(gen, padded)
    return float(step_logp.sum().item())


def teacher_force_trajectories(gen: TokenGenerator, token_lists: Sequence[Sequence[int]],
                               ) -> list[Trajectory]:
    """Build trajectories for existing token sequences (e.g. real texts).

    Runs the generator over each sequence to obtain the (state, action)
    pairs the reward net consumes; no sampling happens here.
    """
    for toks in token_lists:
        _validate_tokens(gen, toks)
    padded, lengths = pad_token_batch(token_lists, gen.pad_id)
    with torch.no_grad():
        step_logp, states, _ = sequence_log_probs(gen, padded)
    out = []
    for i, toks in enumerate(token_lists):
        t_i = int(lengths[i].item())
        out.append(Trajectory(
            tokens=tuple(int(v) for v in toks),
            states=states[i, :t_i].clone(),
            step_log_probs=tuple(float(v) for v in step_logp[i, :t_i]),
            finished=int(toks[-1]) == gen.eos_id,
        ))
    return out


def _corpus_nll(gen: TokenGenerator, padded: torch.Tensor, mask: torch.Tensor) -> float:
    with torch.no_grad():
        step_logp, _, _ = sequence_log_probs(gen, padded)
        return float((-(step_logp * mask).sum() / mask.sum()).item())


def mle_pretrain(gen: TokenGenerator, corpus: Sequence[Sequence[int]], epochs: int,
                 lr: float = 5e-3, batch_size: int = 32,
                 rng: int | torch.Generator | None = None,
                 optimizer: torch.optim.Optimizer | None = None,
                 max_grad_norm: float = 5.0) -> list[float]:
    """Teacher-forced maximum-likelihood pretraining.

    Updates ``gen`` in place and returns the mean per-token NLL measured on
    the full corpus after each epoch (dropout disabled for the measurement).
    ``epochs=0`` leaves the parameters untouched.
    """
    if not corpus:
        raise GeneratorError("mle_pretrain needs a non-empty corpus")
    if epochs == 0:
        return []
    rng = as_rng(rng if rng is not None else 0)
    if optimizer is None:
        optimizer = torch.optim.AdamW(gen.parameters(), lr=lr, weight_decay=0.0)
    padded, lengths = pad_token_batch(corpus, gen.pad_id)
    mask = length_mask(lengths, padded.shape[1]).to(gen.logit_layer.weight.dtype)
    n = padded.shape[0]
    curve = []
    for _ in range(epochs):
        order = torch.randperm(n, generator=rng)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            b_tok, b_mask = padded[idx], mask[idx]
            step_logp, _, _ = sequence_log_probs(gen, b_tok, dropout_rng=rng)
            loss = -(step_logp * b_mask).sum() / b_mask.sum()
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(gen.parameters(), max_grad_norm)
            optimizer.step()
        curve.append(_corpus_nll(gen, padded, mask))
    gen.check_finite()
    return curve


def _pad_rewards(per_step_rewards: Sequence[Sequence[float]], max_len: int,
                 dtype: torch.dtype) -> torch.Tensor:
    out = torch.zeros(len(per_step_rewards), max_len, dtype=dtype)
    for i, row in enumerate(per_step_rewards):
        if len(row) > 0:
            out[i, : len(row)] = torch.as_tensor(list(row), dtype=dtype)
    return out


def policy_gradient_loss(gen: TokenGenerator, trajectories: Sequence[Trajectory],
                         per_step_rewards: Sequence[Sequence[float]],
                         entropy_weight: float, baseline_value: float,
                         ) -> tuple[torch.Tensor, dict]:
    """Surrogate loss whose gradient is the REINFORCE estimator.

    estimator g = (1/N) sum_n sum_t  grad log q(a_t|s_t) * A_{n,t}
    A_{n,t}     = sum_{t'>=t} (r_{n,t'} - entropy_weight * log q(a_{t'}|s_{t'})) - b

    The advantage is treated as a constant coefficient (detached), so
    autograd on the returned loss yields exactly -g.
    """
    if len(trajectories) != len(per_step_rewards):
        raise GeneratorError("trajectories and per_step_rewards length mismatch")
    if entropy_weight < 0:
        raise GeneratorError(f"entropy_weight must be >= 0, got {entropy_weight}")
    for traj, rew in zip(trajectories, per_step_rewards):
        if len(rew) != traj.length:
            raise GeneratorError(
                f"reward row length {len(rew)} != trajectory length {traj.length}")
    token_lists = [t.tokens for t in trajectories]
    padded, lengths = pad_token_batch(token_lists, gen.pad_id)
    dtype = gen.logit_layer.weight.dtype
    mask = length_mask(lengths, padded.shape[1]).to(dtype)
    rewards = _pad_rewards(per_step_rewards, padded.shape[1], dtype)
    if not torch.isfinite(rewards).all():
        raise GeneratorError("NaN in rewards")

    step_logp, _, logits = sequence_log_probs(gen, padded)
    logp_const = step_logp.detach()
    reg_rewards = (rewards - entropy_weight * logp_const) * mask
    returns_to_go = reg_rewards.flip(1).cumsum(1).flip(1)
    advantage = (returns_to_go - baseline_value) * mask
    loss = -((step_logp * advantage.detach()) * mask).sum(dim=1).mean()

    with torch.no_grad():
        probs = torch.softmax(logits, dim=-1)
        step_entropy = -(probs * torch.log(probs.clamp_min(1e-12))).sum(dim=-1)
        mean_entropy = float(((step_entropy * mask).sum() / mask.sum()).item())
        mean_return = float((rewards * mask).sum(dim=1).mean().item())
        mean_return_reg = float(reg_rewards.sum(dim=1).mean().item())
    diag = {
        "mean_return": mean_return,
        "mean_return_reg": mean_return_reg,
        "mean_entropy": mean_entropy,
    }
    return loss, diag


def policy_gradient_step(gen: TokenGenerator, trajectories: Sequence[Trajectory],
                         per_step_rewards: Sequence[Sequence[float]],
                         entropy_weight: float, baseline: RunningBaseline,
                         lr: float = 5e-3,
                         optimizer: torch.optim.Optimizer | None = None,
                         max_grad_norm: float = 5.0) -> dict:
    """One ascent step on the expected entropy-regularized return.

    Uses the baseline value from before this batch, clips the gradient at
    global norm ``max_grad_norm``, then folds the batch mean return into the
    baseline. The default optimizer is AdamW without weight decay so that a
    zero advantage leaves the parameters exactly unchanged.
    """
    if optimizer is None:
        optimizer = torch.optim.AdamW(gen.parameters(), lr=lr, weight_decay=0.0)
    loss, diag = policy_gradient_loss(gen, trajectories, per_step_rewards,
                                      entropy_weight, baseline.value)
    optimizer.zero_grad()
    loss.backward()
    diag["grad_norm"] = global_grad_norm(gen.parameters())
    nn.utils.clip_grad_norm_(gen.parameters(), max_grad_norm)
    optimizer.step()
    baseline.update(diag["mean_return_reg"])
    gen.check_finite()
    return diag
