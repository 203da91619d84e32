"""Shared fixtures: a deterministic toy corpus and small trained taggers.

Training is the expensive part, so the trained models are session-scoped;
every test that mutates a model must copy it first.
"""

import numpy as np
import pytest

from charcd.attribution import split_three
from charcd.autodiff import Rng
from charcd.corpus import (
    CharVocab,
    DEFAULT_TOY_RULESET,
    FeatureSchema,
    generate_toy_corpus,
)
from charcd.models import (
    CnnConfig,
    Dataset,
    LstmConfig,
    TaggerModel,
    TrainConfig,
    init_params,
    train,
)

TOY_SEED = 7
TOY_WORDS = 400


@pytest.fixture(scope="session")
def toy_corpus():
    """(samples, annotations) drawn once from the default suffix rules."""
    return generate_toy_corpus(DEFAULT_TOY_RULESET, TOY_WORDS,
                               Rng(TOY_SEED).split("corpus"))


@pytest.fixture(scope="session")
def toy_dataset(toy_corpus):
    samples, _ = toy_corpus
    train_s, valid_s, test_s = split_three(samples,
                                           Rng(TOY_SEED).split("split"))
    return Dataset.build(DEFAULT_TOY_RULESET.schema(), train_s, valid_s,
                         test_s)


@pytest.fixture(scope="session")
def toy_annotations(toy_corpus, toy_dataset):
    """Annotations for the held-out test words only."""
    _, annotations = toy_corpus
    by_surface = {a.surface: a for a in annotations}
    return [by_surface[s.surface] for s in toy_dataset.test
            if s.surface in by_surface]


@pytest.fixture(scope="session")
def cnn_model(toy_dataset):
    model, _ = train("cnn", toy_dataset,
                     TrainConfig(lr=3e-3, max_epochs=30, patience=6, seed=3),
                     CnnConfig(embed_dim=12, widths=(1, 2, 3),
                               counts=(8, 8, 8)))
    return model


@pytest.fixture(scope="session")
def lstm_model(toy_dataset):
    model, _ = train("bilstm", toy_dataset,
                     TrainConfig(lr=3e-3, max_epochs=30, patience=6, seed=3),
                     LstmConfig(embed_dim=12, hidden=16))
    return model


def make_model(arch: str, seed: int = 0, chars: str = "abcdefgh",
               embed_dim: int = 5, widths=(1, 2, 3), counts=(3, 4, 2),
               hidden: int = 6, jitter: float = 0.0) -> TaggerModel:
    """Untrained model with freshly initialized (optionally perturbed) weights.

    ``jitter`` adds seeded Gaussian noise so biases become nonzero, which
    matters when exercising the bias routing of the decomposition.
    """
    schema = FeatureSchema(language="toy", classes=(
        ("Number", ("NA", "Sing", "Plur")),
        ("Case", ("NA", "Nom", "Gen")),
    ))
    vocab = CharVocab(chars=tuple(chars),
                      char_counts={c: 2 for c in chars})
    if arch == "cnn":
        config = CnnConfig(embed_dim=embed_dim, widths=tuple(widths),
                           counts=tuple(counts))
    else:
        config = LstmConfig(embed_dim=embed_dim, hidden=hidden)
    rng = Rng(seed)
    params = init_params(arch, config, schema, vocab.size, rng)
    if jitter:
        jrng = rng.split("jitter")
        for name in params:
            params[name] = params[name] + jitter * jrng.normal(
                params[name].shape)
    majority = {name: labels[1] for name, labels in schema.classes}
    return TaggerModel(arch=arch, config=config, schema=schema, vocab=vocab,
                       params=params, majority=majority)


def random_word(rng: Rng, chars: str = "abcdefgh", lo: int = 1,
                hi: int = 10) -> str:
    length = int(rng.integers(lo, hi + 1))
    return "".join(chars[int(rng.integers(0, len(chars)))]
                   for _ in range(length))


def random_index_set(rng: Rng, ids, max_size=None) -> frozenset:
    """Random subset of the non-pad positions of an encoded word."""
    from charcd.corpus import PAD_ID

    eligible = [i for i, v in enumerate(ids) if v != PAD_ID]
    size = int(rng.integers(0, (max_size or len(eligible)) + 1))
    idx = list(eligible)
    rng.shuffle(idx)
    return frozenset(idx[:size])


@pytest.fixture
def rng():
    return Rng(1234)


def assert_close(a, b, rtol=1e-12, atol=1e-12):
    np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=rtol,
                               atol=atol)
