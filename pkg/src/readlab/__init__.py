"""readlab: a desk-scale lab for semi-supervised text classification that
couples a reward-guided text generator to a (k+1)-class adversarial
classifier, with plain-supervised and feature-generator baselines."""

from .corpus import (DatasetSplit, Example, Vocabulary, build_vocab, decode, encode,
                     load_label_text, split_labeled, synth_grammar)
from .errors import ReadLabError
from .generator import (RunningBaseline, TokenGenerator, Trajectory, mle_pretrain,
                        policy_gradient_step, sample_trajectories, trajectory_log_prob)
from .reward import RewardNet, irl_update, step_reward, trajectory_reward
from .classifier import (ClassifierHead, ClassProbs, Encoder, classify, classifier_step,
                         loss_fake, loss_labeled, loss_unlabeled_real)
from .trainer import TrainConfig, RunState, init_state, run, train_iteration
from .evaluate import accuracy, distinct_ngram_ratio, export_features, generation_report, sweep

__version__ = "0.1.0"
