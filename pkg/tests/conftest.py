import pytest
import torch

torch.set_num_threads(1)

from readlab.corpus import build_vocab, synth_grammar


@pytest.fixture(scope="session")
def synth_train():
    return synth_grammar(0, 1000)


@pytest.fixture(scope="session")
def synth_test():
    return synth_grammar(4242, 500)


@pytest.fixture(scope="session")
def synth_vocab(synth_train):
    return build_vocab(synth_train, min_freq=1)
