"""Adversarial training loop for the four variants.

Variant update table (per iteration, in order):

  READ         classifier: L_l+L_u+L_f   reward: IRL step   generator: policy gradient
  D_READ       same as READ with the reward's fake-probability channel zeroed
  GAN_FEATURE  classifier: L_l+L_u+L_f   feature-generator: non-saturating step
  BASELINE     classifier: L_l only

A fresh batch of generated data is produced every iteration. All
randomness flows through named streams ("split", "gen", "reward", "clf",
"batch") derived from the master seed, so the data split and batch order
are identical across variants and every run is bit-reproducible and
resumable from a checkpoint.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from . import checkpoint as ckpt
from .classifier import ClassifierHead, Encoder, class_probabilities, classifier_step, encode_batch
from .corpus import (DatasetSplit, Example, Vocabulary, build_vocab, encode_examples,
                     split_labeled)
from .errors import CheckpointError, ConfigError
from .generator import (RunningBaseline, TokenGenerator, mle_pretrain,
                        policy_gradient_step, sample_trajectories,
                        teacher_force_trajectories)
from .nn_utils import default_init_, make_rng, stream_seed
from .reward import RewardNet, batch_step_rewards, irl_update

VARIANTS = ("READ", "D_READ", "GAN_FEATURE", "BASELINE")
RNG_LABELS = ("gen", "reward", "clf", "batch")

METRIC_FIELDS = ("iteration", "variant", "seed", "label_fraction", "loss_l",
                 "loss_u", "loss_f", "mean_reward_real", "mean_reward_gen", "entropy")


@dataclass
class TrainConfig:
    """All run hyperparameters; learning-rate defaults follow the method's
    published settings (AdamW, 0.005 generator / 0.004 reward / 5e-5 encoder+classifier)."""

    variant: str = "READ"
    seed: int = 1
    label_fraction: float = 0.02
    outer_iterations: int = 2000
    batch_size: int = 32
    max_len: int = 64
    entropy_weight: float = 0.01
    d: int = 64
    pretrain_epochs: int = 5
    eval_every: int = 50
    checkpoint_every: int = 0
    lr_g: float = 0.005
    lr_r: float = 0.004
    lr_mc: float = 5e-5
    weight_decay: float = 0.01
    embed_dim: int = 128
    state_dim: int = 128
    gen_ff_width: int = 128
    gen_ff_layers: int = 4
    gen_dropout: float = 0.1
    reward_hidden: int = 128
    reward_layers: int = 3
    reward_dropout: float = 0.2
    enc_embed_dim: int = 64
    noise_dim: int = 100
    min_freq: int = 1
    loss_weight_l: float = 1.0
    loss_weight_u: float = 1.0
    loss_weight_f: float = 1.0
    max_grad_norm: float = 5.0
    reward_l2: float = 0.01

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if self.outer_iterations < 0:
            raise ConfigError("outer_iterations must be >= 0")
        for name in ("batch_size", "max_len", "eval_every", "d", "embed_dim", "state_dim",
                     "gen_ff_width", "enc_embed_dim", "noise_dim", "min_freq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lr_g", "lr_r", "lr_mc"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.entropy_weight < 0 or self.reward_l2 < 0:
            raise ConfigError("entropy_weight and reward_l2 must be >= 0")
        if self.pretrain_epochs < 0 or self.checkpoint_every < 0:
            raise ConfigError("pretrain_epochs and checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @property
    def reward_mode(self) -> str:
        return "D_READ" if self.variant == "D_READ" else "READ"


class FeatureGenerator(nn.Module):
    """Noise -> two feed-forward layers -> d-dimensional synthetic feature."""

    def __init__(self, noise_dim: int = 100, d: int = 64,
                 init_rng: torch.Generator | None = None):
        super().__init__()
        self.noise_dim = noise_dim
        self.fc1 = nn.Linear(noise_dim, d)
        self.act = nn.LeakyReLU()
        self.fc2 = nn.Linear(d, d)
        if init_rng is not None:
            default_init_(self, init_rng)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(z)))


@dataclass
class RunState:
    config: TrainConfig
    vocab: Vocabulary
    split: DatasetSplit
    k: int
    encoder: Encoder
    head: ClassifierHead
    generator: TokenGenerator | None
    reward_net: RewardNet | None
    feature_gen: FeatureGenerator | None
    optimizers: dict[str, torch.optim.Optimizer]
    rngs: dict[str, torch.Generator]
    baseline: RunningBaseline = field(default_factory=RunningBaseline)
    iteration: int = 0

    @property
    def real_pool(self) -> list[Example]:
        """Real-text pool for the reward's demonstrations: U, or L if U is empty."""
        return self.split.unlabeled if self.split.unlabeled else self.split.labeled

    @property
    def lu_pool(self) -> list[Example]:
        return self.split.labeled + self.split.unlabeled


def infer_num_classes(examples: Sequence[Example]) -> int:
    labels = {ex.label for ex in examples if ex.label is not None}
    if not labels:
        raise ConfigError("training examples carry no labels")
    return max(labels) + 1


def init_state(config: TrainConfig, train_examples: Sequence[Example],
               test_examples: Sequence[Example]) -> RunState:
    config.validate()
    k = infer_num_classes(train_examples)
    split = split_labeled(train_examples, config.label_fraction,
                          stream_seed(config.seed, "split"), k, test=test_examples)
    vocab = build_vocab(list(split.labeled) + list(split.unlabeled), config.min_freq)
    split.labeled = encode_examples(split.labeled, vocab, config.max_len)
    split.unlabeled = encode_examples(split.unlabeled, vocab, config.max_len)
    split.test = encode_examples(split.test, vocab, config.max_len)

    rngs = {label: make_rng(stream_seed(config.seed, label)) for label in RNG_LABELS}
    encoder = Encoder(vocab.size, config.enc_embed_dim, config.d, init_rng=rngs["clf"])
    head = ClassifierHead(config.d, k, init_rng=rngs["clf"])
    generator = reward_net = feature_gen = None
    if config.variant in ("READ", "D_READ"):
        generator = TokenGenerator(vocab.size, config.embed_dim, config.state_dim,
                                   config.gen_ff_width, config.gen_ff_layers,
                                   config.gen_dropout, init_rng=rngs["gen"])
        reward_net = RewardNet(vocab.size, config.state_dim, config.embed_dim,
                               config.reward_hidden, config.reward_layers,
                               config.reward_dropout, init_rng=rngs["reward"])
    elif config.variant == "GAN_FEATURE":
        feature_gen = FeatureGenerator(config.noise_dim, config.d, init_rng=rngs["gen"])

    optimizers = {"mc": torch.optim.AdamW(
        list(encoder.parameters()) + list(head.parameters()),
        lr=config.lr_mc, weight_decay=config.weight_decay)}
    if generator is not None:
        optimizers["gen"] = torch.optim.AdamW(generator.parameters(), lr=config.lr_g,
                                              weight_decay=config.weight_decay)
        optimizers["reward"] = torch.optim.AdamW(reward_net.parameters(), lr=config.lr_r,
                                                 weight_decay=config.weight_decay)
    if feature_gen is not None:
        optimizers["gen"] = torch.optim.AdamW(feature_gen.parameters(), lr=config.lr_g,
                                              weight_decay=config.weight_decay)
    return RunState(config=config, vocab=vocab, split=split, k=k, encoder=encoder,
                    head=head, generator=generator, reward_net=reward_net,
                    feature_gen=feature_gen, optimizers=optimizers, rngs=rngs)


def _draw_indices(rng: torch.Generator, pool_size: int, batch_size: int) -> list[int]:
    idx = torch.randint(pool_size, (batch_size,), generator=rng)
    return [int(i) for i in idx]


def fake_probabilities(state: RunState, token_lists: Sequence[Sequence[int]]) -> list[float]:
    """Classifier's current fake-class probability for each sequence."""
    with torch.no_grad():
        probs = class_probabilities(state.head, encode_batch(state.encoder, token_lists))
    return [float(p) for p in probs[:, -1]]


def _standardized_step_rewards(reward_net: RewardNet, trajectories, p_fakes, mode: str,
                               ) -> list[list[float]]:
    """Evaluate per-step rewards and standardize them over active steps."""
    with torch.no_grad():
        per_step, mask, _ = batch_step_rewards(reward_net, trajectories, p_fakes, mode=mode)
        active = mask > 0
        if bool(active.any()):
            vals = per_step[active]
            std = (per_step - vals.mean()) / (vals.std(unbiased=False) + 1e-8)
            per_step = std * mask
    return [[float(v) for v in per_step[i, : t.length]]
            for i, t in enumerate(trajectories)]


def train_iteration(state: RunState, config: TrainConfig | None = None) -> dict:
    """One outer iteration; returns the per-loss metrics for this step."""
    config = config or state.config
    split, rng_batch = state.split, state.rngs["batch"]
    # identical draw pattern for every variant so batch order never shifts
    idx_l = _draw_indices(rng_batch, len(split.labeled), config.batch_size)
    idx_lu = _draw_indices(rng_batch, len(state.lu_pool), config.batch_size)
    idx_u = _draw_indices(rng_batch, len(state.real_pool), config.batch_size)
    batch_l = ([split.labeled[i].tokens for i in idx_l],
               [split.labeled[i].label for i in idx_l])
    batch_lu = [state.lu_pool[i].tokens for i in idx_lu]
    batch_u = [state.real_pool[i].tokens for i in idx_u]
    weights = (config.loss_weight_l, config.loss_weight_u, config.loss_weight_f)

    metrics: dict = {"loss_l": None, "loss_u": None, "loss_f": None,
                     "mean_reward_real": None, "mean_reward_gen": None, "entropy": None}

    if config.variant == "BASELINE":
        breakdown = classifier_step(state.encoder, state.head, batch_l, None, None,
                                    optimizer=state.optimizers["mc"], loss_weights=weights)
        metrics.update({k: breakdown[k] for k in ("loss_l", "loss_u", "loss_f")})

    elif config.variant == "GAN_FEATURE":
        noise = torch.randn(config.batch_size, config.noise_dim, generator=state.rngs["gen"])
        fake_feats = state.feature_gen(noise).detach()
        breakdown = classifier_step(state.encoder, state.head, batch_l, batch_lu,
                                    fake_feats, optimizer=state.optimizers["mc"],
                                    loss_weights=weights)
        metrics.update({k: breakdown[k] for k in ("loss_l", "loss_u", "loss_f")})
        noise = torch.randn(config.batch_size, config.noise_dim, generator=state.rngs["gen"])
        probs = class_probabilities(state.head, state.feature_gen(noise))
        fg_loss = -torch.log((1.0 - probs[:, -1]).clamp_min(1e-12)).mean()
        opt = state.optimizers["gen"]
        opt.zero_grad()
        fg_loss.backward()
        opt.step()
        metrics["feature_gen_loss"] = float(fg_loss.item())

    else:  # READ / D_READ
        trajs = sample_trajectories(state.generator, config.batch_size, config.max_len,
                                    state.rngs["gen"])
        fake_tokens = [t.tokens for t in trajs]
        breakdown = classifier_step(state.encoder, state.head, batch_l, batch_lu,
                                    fake_tokens, optimizer=state.optimizers["mc"],
                                    loss_weights=weights)
        metrics.update({k: breakdown[k] for k in ("loss_l", "loss_u", "loss_f")})
        if config.variant == "READ":
            p_gen = fake_probabilities(state, fake_tokens)
            p_real = fake_probabilities(state, batch_u)
        else:
            p_gen = [0.0] * len(trajs)
            p_real = [0.0] * len(batch_u)
        real_trajs = teacher_force_trajectories(state.generator, batch_u)
        irl_diag = irl_update(state.reward_net, real_trajs, trajs,
                              [t.log_prob for t in trajs], p_real, p_gen,
                              mode=config.reward_mode,
                              optimizer=state.optimizers["reward"],
                              dropout_rng=state.rngs["reward"],
                              reward_l2=config.reward_l2,
                              max_grad_norm=config.max_grad_norm)
        metrics["mean_reward_real"] = irl_diag["mean_reward_real"]
        metrics["mean_reward_gen"] = irl_diag["mean_reward_gen"]
        rewards = _standardized_step_rewards(state.reward_net, trajs, p_gen,
                                             config.reward_mode)
        pg_diag = policy_gradient_step(state.generator, trajs, rewards,
                                       config.entropy_weight, state.baseline,
                                       optimizer=state.optimizers["gen"],
                                       max_grad_norm=config.max_grad_norm)
        metrics["entropy"] = pg_diag["mean_entropy"]

    state.iteration += 1
    return metrics


def evaluate_accuracy(state: RunState) -> float:
    from .evaluate import accuracy
    return accuracy(state.encoder, state.head, state.split.test)


def _metrics_record(state: RunState, metrics: dict | None, test_accuracy: float | None) -> dict:
    rec = {
        "iteration": state.iteration,
        "variant": state.config.variant,
        "seed": state.config.seed,
        "label_fraction": state.config.label_fraction,
        "loss_l": None, "loss_u": None, "loss_f": None,
        "mean_reward_real": None, "mean_reward_gen": None, "entropy": None,
    }
    if metrics:
        rec.update({k: metrics.get(k) for k in rec if k in metrics})
    if test_accuracy is not None:
        rec["test_accuracy"] = test_accuracy
    return rec


def save_run_checkpoint(state: RunState, ckpt_dir: str | Path) -> None:
    arrays: dict = {}
    arrays.update(ckpt.module_arrays(state.encoder, "model/encoder"))
    arrays.update(ckpt.module_arrays(state.head, "model/head"))
    if state.generator is not None:
        arrays.update(ckpt.module_arrays(state.generator, "model/generator"))
        arrays.update(ckpt.module_arrays(state.reward_net, "model/reward"))
    if state.feature_gen is not None:
        arrays.update(ckpt.module_arrays(state.feature_gen, "model/feature_gen"))
    for label, opt in state.optimizers.items():
        arrays.update(ckpt.optimizer_arrays(opt, f"optim/{label}"))
    arrays.update(ckpt.rng_arrays(state.rngs))
    meta = {
        "iteration": state.iteration,
        "baseline_value": state.baseline.value,
        "variant": state.config.variant,
        "k": state.k,
        "vocab_size": state.vocab.size,
    }
    ckpt.save_checkpoint(ckpt_dir, arrays, meta)


def restore_run_checkpoint(state: RunState, ckpt_dir: str | Path) -> None:
    arrays, manifest = ckpt.load_checkpoint(ckpt_dir)
    for key, want in (("variant", state.config.variant), ("k", state.k),
                      ("vocab_size", state.vocab.size)):
        if manifest.get(key) != want:
            raise CheckpointError(
                f"checkpoint {key}={manifest.get(key)!r} does not match run ({want!r})")
    ckpt.load_module_arrays(state.encoder, arrays, "model/encoder")
    ckpt.load_module_arrays(state.head, arrays, "model/head")
    if state.generator is not None:
        ckpt.load_module_arrays(state.generator, arrays, "model/generator")
        ckpt.load_module_arrays(state.reward_net, arrays, "model/reward")
    if state.feature_gen is not None:
        ckpt.load_module_arrays(state.feature_gen, arrays, "model/feature_gen")
    for label, opt in state.optimizers.items():
        ckpt.load_optimizer_arrays(opt, arrays, f"optim/{label}")
    ckpt.load_rng_arrays(state.rngs, arrays)
    state.baseline.value = float(manifest["baseline_value"])
    state.iteration = int(manifest["iteration"])


def run(config: TrainConfig, train_examples: Sequence[Example],
        test_examples: Sequence[Example], outdir: str | Path | None = None,
        resume_from: str | Path | None = None) -> tuple[RunState, list[dict]]:
    """Full training run: optional MLE pretraining, then outer iterations.

    Writes one JSON record per iteration to ``<outdir>/metrics.jsonl`` (plus
    a record at iteration 0), evaluates test accuracy every ``eval_every``
    iterations and at the end, and checkpoints to ``<outdir>/ckpt-<iter>/``.
    With ``resume_from`` the state is restored and the loop continues from
    the checkpointed iteration; metrics are appended.
    """
    state = init_state(config, train_examples, test_examples)
    records: list[dict] = []
    sink = None
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        state.vocab.save(outdir / "vocab.txt")
        sink = open(outdir / "metrics.jsonl", "a" if resume_from else "w",
                    encoding="utf-8")

    def emit(rec: dict) -> None:
        records.append(rec)
        if sink is not None:
            sink.write(json.dumps(rec) + "\n")
            sink.flush()

    try:
        if resume_from is not None:
            restore_run_checkpoint(state, resume_from)
        else:
            if state.generator is not None and config.pretrain_epochs > 0:
                corpus = [ex.tokens for ex in state.real_pool]
                mle_pretrain(state.generator, corpus, config.pretrain_epochs,
                             lr=config.lr_g, batch_size=config.batch_size,
                             rng=state.rngs["gen"], optimizer=state.optimizers["gen"],
                             max_grad_norm=config.max_grad_norm)
            emit(_metrics_record(state, None, evaluate_accuracy(state)))

        while state.iteration < config.outer_iterations:
            metrics = train_iteration(state)
            i = state.iteration
            want_eval = (i % config.eval_every == 0) or (i == config.outer_iterations)
            acc = evaluate_accuracy(state) if want_eval else None
            emit(_metrics_record(state, metrics, acc))
            if outdir is not None and (
                    (config.checkpoint_every and i % config.checkpoint_every == 0)
                    or i == config.outer_iterations):
                save_run_checkpoint(state, outdir / f"ckpt-{i}")
        if config.outer_iterations == 0 and outdir is not None:
            save_run_checkpoint(state, outdir / "ckpt-0")
    except Exception:
        if sink is not None:
            sink.close()
        raise
    if sink is not None:
        sink.close()
    return state, records
