"""Session fixtures: small trained cascades over synthetic corpora."""

import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from cascade_asr.lexicon import Lexicon, build_vocab, transcript_to_units
from cascade_asr.training import (TrainConfig, teacher_forced_accuracy,
                                  train)
from cascade_asr.transformer import ModelConfig, Transformer

FEATURE_DIM = 20
FRAMES_PER_SYLLABLE = 3

# one line per release criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def syllable_pattern(syllable, vocab_index):
    """Deterministic feature block for one syllable."""
    rng = np.random.default_rng([17, vocab_index])
    return rng.normal(size=(FRAMES_PER_SYLLABLE, FEATURE_DIM))


@dataclass
class ToyWorld:
    lex: Lexicon
    unit_vocab: object
    word_vocab: object
    corpus: list               # (utterance_id, [words])
    acoustic_dataset: list     # (features, unit ids)
    word_dataset: list         # (unit ids, word ids)
    features: dict             # utterance_id -> features
    acoustic_model: object = None
    word_model: object = None
    acoustic_steps: int = 0
    word_steps: int = 0
    train_seconds: float = 0.0

    def reference_units(self):
        return {utt: list(transcript_to_units(
            words, self.lex, "syllable", self.unit_vocab).ids)
            for utt, words in self.corpus}

    def references(self):
        return {utt: " ".join(words) for utt, words in self.corpus}


def synth_features(words, lex, unit_vocab):
    syllables = []
    for w in words:
        syllables.extend(lex.pronunciation(w))
    blocks = [syllable_pattern(s, unit_vocab.index[s]) for s in syllables]
    return np.concatenate(blocks, axis=0)


def build_world(lex, corpus):
    unit_vocab = build_vocab(lex.syllable_inventory())
    word_vocab = build_vocab(lex.word_inventory())
    features, acoustic_dataset, word_dataset = {}, [], []
    for utt, words in corpus:
        feats = synth_features(words, lex, unit_vocab)
        units = transcript_to_units(words, lex, "syllable", unit_vocab)
        wtoks = word_vocab.encode(words)
        features[utt] = feats
        acoustic_dataset.append((feats, list(units.ids)))
        word_dataset.append((list(units.ids), list(wtoks.ids)))
    return ToyWorld(lex=lex, unit_vocab=unit_vocab, word_vocab=word_vocab,
                    corpus=corpus, acoustic_dataset=acoustic_dataset,
                    word_dataset=word_dataset, features=features)


def small_model(output_vocab_size, input_dim=0, input_vocab_size=0, seed=0):
    cfg = ModelConfig(n_layers=2, d_model=64, n_heads=4, d_k=16, d_v=16,
                      d_ff=128, warmup_steps=150, dropout_rate=0.0,
                      output_vocab_size=output_vocab_size,
                      input_dim=input_dim,
                      input_vocab_size=input_vocab_size)
    return Transformer(cfg, seed=seed, dtype=np.float32)


def train_until_accurate(model, dataset, pad_id, max_steps, seed,
                         target=0.995, check_every=50, batch_size=10):
    cfg = TrainConfig(batch_size=batch_size, max_steps=max_steps, seed=seed,
                      lr_scale=1.0)
    reached = {"step": max_steps}

    def callback(step, loss, m):
        if step % check_every == 0:
            if teacher_forced_accuracy(m, dataset) >= target:
                reached["step"] = step
                return True
        return False

    train(model, dataset, cfg, pad_id=pad_id, callback=callback)
    return reached["step"]


def make_toy_lexicon():
    """30 words over 20 syllables (4 initials x 5 tonal finals)."""
    initials = ["s", "t", "k", "m"]
    finals = ["a1", "e2", "i3", "o4", "u1"]
    syllable_phones = {i + f: [i, f] for i in initials for f in finals}

    def letters(syl):
        return syl[0] + syl[1]

    word_prons = {}
    for syl in sorted(syllable_phones):
        word_prons[letters(syl)] = [[syl]]          # 20 monosyllables
    pairs = [("sa1", "te2"), ("ki3", "mo4"), ("ma1", "su1"),
             ("te2", "sa1"), ("ko4", "ku1"), ("mi3", "ta1"),
             ("se2", "mu1"), ("to4", "ka1"), ("ke2", "si3"),
             ("mu1", "to4")]
    for a, b in pairs:                              # 10 disyllables
        word_prons[letters(a) + letters(b)] = [[a, b]]
    assert len(word_prons) == 30
    return Lexicon(word_prons=word_prons, syllable_phones=syllable_phones)


def _stream_unambiguous(syllables):
    """Reject immediately repeated syllable blocks of length 1 or 2: with
    whitespace-free scoring those periodic streams are the one ambiguity a
    product-of-probabilities cascade resolves toward the shorter reading."""
    for i in range(len(syllables) - 1):
        if syllables[i] == syllables[i + 1]:
            return False
    for i in range(len(syllables) - 3):
        if syllables[i:i + 2] == syllables[i + 2:i + 4]:
            return False
    return True


def sample_corpus(lex, rng, n_utts=50):
    words = sorted(lex.word_prons)
    corpus = []
    for i in range(n_utts):
        n = int(rng.integers(2, 5))
        while True:
            seq = [words[int(j)] for j in rng.integers(0, len(words),
                                                       size=n)]
            stream = [s for w in seq for s in lex.pronunciation(w)]
            if _stream_unambiguous(stream):
                break
        corpus.append((f"utt{i:03d}", seq))
    return corpus


@pytest.fixture(scope="session")
def toy_world():
    """50-utterance synthetic corpus with both cascade stages trained."""
    lex = make_toy_lexicon()
    corpus = sample_corpus(lex, np.random.default_rng(42))
    world = build_world(lex, corpus)
    t0 = time.monotonic()
    world.acoustic_model = small_model(len(world.unit_vocab),
                                       input_dim=FEATURE_DIM, seed=1)
    world.acoustic_steps = train_until_accurate(
        world.acoustic_model, world.acoustic_dataset,
        world.unit_vocab.pad_id, max_steps=2000, seed=1, target=1.0)
    world.word_model = small_model(len(world.word_vocab),
                                   input_vocab_size=len(world.unit_vocab),
                                   seed=2)
    world.word_steps = train_until_accurate(
        world.word_model, world.word_dataset, world.word_vocab.pad_id,
        max_steps=2000, seed=2, target=1.0)
    world.train_seconds = time.monotonic() - t0
    return world


@pytest.fixture(scope="session")
def homophone_world():
    """Tiny corpus where two words share a pronunciation; the stage-2
    floor is 1 substitution over 16 reference characters = 6.25%."""
    syllable_phones = {"ti3": ["t", "i3"], "ku1": ["k", "u1"],
                       "ma1": ["m", "a1"]}
    word_prons = {"ti": [["ti3"]], "ku": [["ku1"]],
                  "ma": [["ma1"]], "mo": [["ma1"]]}  # homophone pair
    lex = Lexicon(word_prons=word_prons, syllable_phones=syllable_phones)
    corpus = [("u1", ["ti", "ma"]), ("u2", ["ti", "mo"]),
              ("u3", ["ku", "ma"]), ("u4", ["ti", "ma"])]
    world = build_world(lex, corpus)
    world.acoustic_model = small_model(len(world.unit_vocab),
                                       input_dim=FEATURE_DIM, seed=3)
    world.acoustic_steps = train_until_accurate(
        world.acoustic_model, world.acoustic_dataset,
        world.unit_vocab.pad_id, max_steps=1500, seed=3, batch_size=4)
    world.word_model = small_model(len(world.word_vocab),
                                   input_vocab_size=len(world.unit_vocab),
                                   seed=4)
    world.word_steps = train_until_accurate(
        world.word_model, world.word_dataset, world.word_vocab.pad_id,
        max_steps=1500, seed=4, target=0.90, batch_size=4)
    return world
