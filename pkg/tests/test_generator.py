import math

import numpy as np
import pytest
import torch

from readlab.corpus import BOS_ID, EOS_ID, encode_examples
from readlab.errors import GeneratorError
from readlab.generator import (RunningBaseline, TokenGenerator, mle_pretrain,
                               policy_gradient_loss, policy_gradient_step,
                               sample_trajectories, teacher_force_trajectories,
                               trajectory_log_prob)
from readlab.nn_utils import make_rng


def micro_generator(vocab_size=12, seed=0, dtype=torch.float32, **kw):
    kw.setdefault("embed_dim", 8)
    kw.setdefault("state_dim", 8)
    kw.setdefault("ff_width", 8)
    return TokenGenerator(vocab_size, init_rng=seed, dtype=dtype, **kw)


def zero_logit_generator(vocab_size=10, dtype=torch.float32, **kw):
    """All-zero parameters: the policy is exactly uniform at every step."""
    gen = TokenGenerator(vocab_size, embed_dim=4, state_dim=4, ff_width=4, dtype=dtype,
                         **kw)
    with torch.no_grad():
        for p in gen.parameters():
            p.zero_()
    return gen


class TestSampling:
    def test_contract_shapes(self):
        gen = micro_generator()
        trajs = sample_trajectories(gen, 3, max_len=6, rng=1)
        assert len(trajs) == 3
        for t in trajs:
            assert 1 <= t.length <= 6
            assert t.states.shape == (t.length, gen.state_dim)
            assert all(lp <= 0.0 for lp in t.step_log_probs)
            assert t.tokens == t.actions
            if t.finished:
                assert t.tokens[-1] == EOS_ID
                assert t.active_length == t.length - 1

    def test_fixed_seed_bit_reproducible(self):
        gen = micro_generator()
        a = sample_trajectories(gen, 8, max_len=10, rng=77)
        b = sample_trajectories(gen, 8, max_len=10, rng=77)
        assert [t.tokens for t in a] == [t.tokens for t in b]
        assert [t.step_log_probs for t in a] == [t.step_log_probs for t in b]

    def test_near_zero_temperature_is_greedy(self):
        gen = micro_generator(seed=3)
        runs = [tuple(t.tokens for t in sample_trajectories(gen, 2, 5, rng=s,
                                                            temperature=1e-3))
                for s in range(5)]
        assert len(set(runs)) == 1
        # and it matches explicit greedy decoding
        greedy = []
        with torch.no_grad():
            x = torch.tensor([BOS_ID])
            h = torch.zeros(1, 1, gen.state_dim)
            c = torch.zeros(1, 1, gen.state_dim)
            for _ in range(5):
                out, (h, c) = gen.lstm(gen.embedding(x).unsqueeze(1), (h, c))
                logits = gen.logits_from_states(out[:, 0, :])
                x = logits.argmax(dim=-1)
                greedy.append(int(x.item()))
                if greedy[-1] == EOS_ID:
                    break
        assert list(runs[0][0]) == greedy

    def test_first_token_histogram_matches_multinomial_oracle(self):
        # uniform policy, max_len=1: counts must sit within 3 sigma of n*p
        vocab_size, n = 10, 100_000
        gen = zero_logit_generator(vocab_size)
        trajs = sample_trajectories(gen, n, max_len=1, rng=123)
        counts = np.bincount([t.tokens[0] for t in trajs], minlength=vocab_size)
        p = 1.0 / vocab_size
        sigma = math.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= 3 * sigma)

    def test_bad_args(self):
        gen = micro_generator()
        with pytest.raises(GeneratorError):
            sample_trajectories(gen, 0, 5, rng=1)
        with pytest.raises(GeneratorError):
            sample_trajectories(gen, 1, 5, rng=1, temperature=0.0)


class TestLogProb:
    def test_uniform_policy_single_token(self):
        vocab_size = 10
        gen = zero_logit_generator(vocab_size)
        assert trajectory_log_prob(gen, [4]) == pytest.approx(math.log(1 / vocab_size),
                                                              abs=1e-6)

    def test_matches_sampled_step_log_probs(self):
        gen = micro_generator(seed=5, dtype=torch.float64)
        for traj in sample_trajectories(gen, 16, max_len=8, rng=9):
            recomputed = trajectory_log_prob(gen, traj.tokens)
            assert abs(sum(traj.step_log_probs) - recomputed) <= 1e-6

    def test_hand_built_chain_rule_oracle(self):
        # zero weights except the logit bias: every step's distribution is
        # softmax(bias), so the sequence log-prob is a hand-computable product
        gen = zero_logit_generator(vocab_size=2, pad_id=0, bos_id=0, eos_id=1)
        bias = [0.3, -0.4]
        with torch.no_grad():
            gen.logit_layer.bias.copy_(torch.tensor(bias))
        z = math.exp(0.3) + math.exp(-0.4)
        expected = math.log(math.exp(0.3) / z) * 2 + math.log(math.exp(-0.4) / z)
        assert trajectory_log_prob(gen, [0, 0, 1]) == pytest.approx(expected, abs=1e-6)

    def test_out_of_range_token_errors(self):
        gen = micro_generator(vocab_size=6)
        with pytest.raises(GeneratorError):
            trajectory_log_prob(gen, [2, 99])
        with pytest.raises(GeneratorError):
            trajectory_log_prob(gen, [])

    def test_softmax_normalization(self):
        gen = micro_generator(dtype=torch.float64)
        states = torch.randn(5, gen.state_dim, generator=make_rng(2), dtype=torch.float64)
        probs = torch.softmax(gen.logits_from_states(states), dim=-1)
        assert torch.allclose(probs.sum(dim=-1), torch.ones(5, dtype=torch.float64),
                              atol=1e-9)

    def test_teacher_forced_trajectories_align(self):
        gen = micro_generator(seed=8)
        token_lists = [[4, 5, EOS_ID], [6, 7, 8, 9]]
        trajs = teacher_force_trajectories(gen, token_lists)
        assert trajs[0].finished and not trajs[1].finished
        assert trajs[0].active_length == 2 and trajs[1].active_length == 4
        for traj, toks in zip(trajs, token_lists):
            assert traj.log_prob == pytest.approx(trajectory_log_prob(gen, toks),
                                                  abs=1e-5)


class TestMlePretrain:
    def test_overfits_single_sentence(self):
        gen = micro_generator(vocab_size=9, seed=1)
        corpus = [[4, 5, 6, 7, EOS_ID]] * 32
        curve = mle_pretrain(gen, corpus, epochs=50, lr=1e-2, batch_size=8, rng=0)
        assert curve[-1] < 0.1

    def test_zero_epochs_is_noop(self):
        gen = micro_generator(seed=2)
        before = [p.clone() for p in gen.parameters()]
        assert mle_pretrain(gen, [[4, 5]], epochs=0) == []
        for p, q in zip(gen.parameters(), before):
            assert torch.equal(p, q)

    def test_nll_mostly_non_increasing(self, synth_train, synth_vocab):
        corpus = [ex.tokens for ex in
                  encode_examples(synth_train[:150], synth_vocab, max_len=12)]
        gen = TokenGenerator(synth_vocab.size, embed_dim=24, state_dim=24, ff_width=24,
                             init_rng=4)
        curve = mle_pretrain(gen, corpus, epochs=10, lr=5e-3, rng=1)
        drops = sum(curve[i + 1] <= curve[i] for i in range(len(curve) - 1))
        assert drops / (len(curve) - 1) >= 0.9

    def test_generated_bigrams_stay_in_corpus_support(self, synth_train, synth_vocab):
        encoded = encode_examples(synth_train[:300], synth_vocab, max_len=12)
        corpus = [ex.tokens for ex in encoded]
        gen = TokenGenerator(synth_vocab.size, embed_dim=32, state_dim=32, ff_width=32,
                             init_rng=6)
        mle_pretrain(gen, corpus, epochs=30, lr=5e-3, rng=2)
        support = {(a, b) for toks in corpus for a, b in zip(toks, toks[1:])}
        trajs = sample_trajectories(gen, 100, max_len=12, rng=11)
        pairs = [(a, b) for t in trajs for a, b in zip(t.tokens, t.tokens[1:])]
        assert pairs, "pretrained generator produced only single-token samples"
        in_support = sum(p in support for p in pairs) / len(pairs)
        assert in_support >= 0.8

    def test_empty_corpus_rejected(self):
        with pytest.raises(GeneratorError):
            mle_pretrain(micro_generator(), [], epochs=1)


class TestPolicyGradient:
    def test_zero_rewards_zero_entropy_leaves_params_unchanged(self):
        gen = micro_generator(seed=7)
        trajs = sample_trajectories(gen, 4, max_len=5, rng=3)
        rewards = [[0.0] * t.length for t in trajs]
        before = [p.clone() for p in gen.parameters()]
        loss, _ = policy_gradient_loss(gen, trajs, rewards, 0.0, 0.0)
        grads = torch.autograd.grad(loss, list(gen.parameters()), allow_unused=True)
        assert all(g is None or torch.count_nonzero(g) == 0 for g in grads)
        policy_gradient_step(gen, trajs, rewards, 0.0, RunningBaseline(value=0.0))
        for p, q in zip(gen.parameters(), before):
            assert torch.equal(p, q)

    def test_nan_rewards_rejected_before_update(self):
        gen = micro_generator(seed=7)
        trajs = sample_trajectories(gen, 2, max_len=3, rng=3)
        rewards = [[float("nan")] * t.length for t in trajs]
        before = [p.clone() for p in gen.parameters()]
        with pytest.raises(GeneratorError, match="NaN"):
            policy_gradient_step(gen, trajs, rewards, 0.0, RunningBaseline())
        for p, q in zip(gen.parameters(), before):
            assert torch.equal(p, q)

    def test_reward_length_mismatch_rejected(self):
        gen = micro_generator(seed=7)
        trajs = sample_trajectories(gen, 2, max_len=4, rng=3)
        with pytest.raises(GeneratorError, match="length"):
            policy_gradient_step(gen, trajs, [[0.0]] * 2, 0.0, RunningBaseline())

    def test_two_token_bandit_drives_probability_up(self):
        # vocab {A=0, B=1}, one-step episodes, reward 1 for A only: P(A) must
        # rise essentially monotonically toward certainty
        gen = TokenGenerator(2, embed_dim=4, state_dim=4, ff_width=4, pad_id=0,
                             bos_id=0, eos_id=1, init_rng=1)
        opt = torch.optim.AdamW(gen.parameters(), lr=0.05, weight_decay=0.0)
        baseline = RunningBaseline()
        rng = make_rng(5)

        def prob_a():
            with torch.no_grad():
                x = torch.tensor([BOS_ID % 2])
                out, _ = gen.lstm(gen.embedding(x).unsqueeze(1))
                return float(torch.softmax(gen.logits_from_states(out[:, 0, :]),
                                           -1)[0, 0].item())

        curve = [prob_a()]
        for _ in range(200):
            trajs = sample_trajectories(gen, 64, max_len=1, rng=rng)
            rewards = [[1.0 if t.tokens[0] == 0 else 0.0] for t in trajs]
            policy_gradient_step(gen, trajs, rewards, 0.0, baseline, optimizer=opt)
            curve.append(prob_a())
        assert curve[-1] > 0.95
        # strictly rising until it clears 0.95, never falling afterwards
        # (float32 saturates at exactly 1.0, so "strict" can only apply below)
        crossing = next(i for i, v in enumerate(curve) if v > 0.95)
        assert all(b > a for a, b in zip(curve[:crossing], curve[1:crossing + 1]))
        assert all(b >= a for a, b in zip(curve, curve[1:]))

    def test_entropy_rises_under_pure_entropy_reward(self):
        # peaked initialization, zero external reward, entropy bonus only
        gen = micro_generator(vocab_size=8, seed=9)
        with torch.no_grad():
            gen.logit_layer.bias.fill_(-2.0)
            gen.logit_layer.bias[5] = 2.0
        opt = torch.optim.AdamW(gen.parameters(), lr=3e-3, weight_decay=0.0)
        baseline = RunningBaseline()
        rng = make_rng(4)
        entropies = []
        for _ in range(100):
            trajs = sample_trajectories(gen, 128, max_len=4, rng=rng)
            rewards = [[0.0] * t.length for t in trajs]
            diag = policy_gradient_step(gen, trajs, rewards, 0.1, baseline, optimizer=opt)
            entropies.append(diag["mean_entropy"])
        assert entropies[-1] > entropies[0]
        non_decreasing = sum(b >= a - 1e-3 for a, b in zip(entropies, entropies[1:]))
        assert non_decreasing / (len(entropies) - 1) >= 0.9

    def test_finite_difference_on_micro_configuration(self):
        from readlab.gradcheck import check_generator
        assert check_generator() < 1e-4
