"""Beam search and the two-stage greedy cascade decoder.

Stage 1 finds the best sub-word unit sequence from audio features with beam
size beta; stage 2 maps that single best sequence to words with beam size
gamma.  The product Pr(W|s)*Pr(s|X) is thus maximized greedily, one stage
at a time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

DEFAULT_BETA = 13
DEFAULT_GAMMA = 6


@dataclass
class CascadeConfig:
    beta: int = DEFAULT_BETA
    gamma: int = DEFAULT_GAMMA
    max_len_units: int = 200
    max_len_words: int = 100

    def __post_init__(self):
        if self.beta < 1 or self.gamma < 1:
            raise ContractError("beam sizes must be >= 1")


@dataclass
class BeamHypothesis:
    tokens: list              # token ids, starts with <S>
    logprob: float
    finished: bool = False
    truncated: bool = False


class SequenceScorer:
    """Interface beam_search expects: start/end ids plus next-token
    log-probabilities for a prefix."""

    sos_id: int
    eos_id: int

    def next_logprobs(self, prefix_ids):
        raise NotImplementedError


class TransformerScorer(SequenceScorer):
    """Adapts a Transformer + one encoded input to the scorer interface."""

    def __init__(self, model, inputs, sos_id, eos_id):
        self.model = model
        self.memory = model.encode(inputs)
        self.sos_id = sos_id
        self.eos_id = eos_id

    def next_logprobs(self, prefix_ids):
        return self.model.decode_step(self.memory, prefix_ids)


def _hyp_sort_key(h):
    # higher logprob first; ties: shorter, then lexicographically lower ids
    return (-h.logprob, len(h.tokens), tuple(h.tokens))


def beam_search(scorer, beam_size, max_len):
    """Standard beam search, fully deterministic.

    Each live hypothesis expands over the whole vocabulary; the top
    beam_size candidates by accumulated log-probability survive.  Emitting
    the end token moves a hypothesis to the finished pool.  If nothing has
    finished by max_len generated tokens, the best live hypothesis is
    returned with truncated=True.
    """
    if beam_size < 1 or max_len < 1:
        raise ContractError(f"beam_size/max_len must be >= 1, got "
                            f"{beam_size}/{max_len}")
    live = [BeamHypothesis(tokens=[scorer.sos_id], logprob=0.0)]
    finished = []
    for _ in range(max_len):
        candidates = []
        for hyp in live:
            logp = np.asarray(scorer.next_logprobs(hyp.tokens),
                              dtype=np.float64)
            for tok in range(logp.shape[0]):
                candidates.append(BeamHypothesis(
                    tokens=hyp.tokens + [tok],
                    logprob=hyp.logprob + float(logp[tok]),
                    finished=(tok == scorer.eos_id)))
        candidates.sort(key=_hyp_sort_key)
        kept = candidates[:beam_size]
        live = [h for h in kept if not h.finished]
        finished.extend(h for h in kept if h.finished)
        if not live:
            break
    if finished:
        finished.sort(key=_hyp_sort_key)
        return finished
    best = sorted(live, key=_hyp_sort_key)[0]
    best.truncated = True
    return [best]


def greedy_decode(scorer, max_len):
    """Argmax decoding; identical to beam_search with beam_size=1."""
    return beam_search(scorer, 1, max_len)[0]


def cascade_decode(acoustic_model, word_model, features, unit_vocab,
                   word_vocab, cfg=None):
    """Features -> 1-best unit sequence (beam beta) -> 1-best word sequence
    (beam gamma).

    Returns (word hypothesis, unit hypothesis); a truncated stage 1
    propagates its flag to the result.
    """
    cfg = cfg or CascadeConfig()
    stage1 = TransformerScorer(acoustic_model, features,
                               unit_vocab.sos_id, unit_vocab.eos_id)
    unit_hyp = beam_search(stage1, cfg.beta, cfg.max_len_units)[0]
    inner = [t for t in unit_hyp.tokens
             if t not in (unit_vocab.sos_id, unit_vocab.eos_id)]
    # stage 2 consumes the unit tokens with fresh <S>...</S> framing
    stage2_input = [unit_vocab.sos_id] + inner + [unit_vocab.eos_id]
    stage2 = TransformerScorer(word_model, stage2_input,
                               word_vocab.sos_id, word_vocab.eos_id)
    word_hyp = beam_search(stage2, cfg.gamma, cfg.max_len_words)[0]
    if unit_hyp.truncated:
        word_hyp.truncated = True
    return word_hyp, unit_hyp


def units_to_words(word_model, unit_ids, word_vocab, gamma,
                   max_len=100):
    """Second stage alone: decode a unit id sequence into words."""
    scorer = TransformerScorer(word_model, list(unit_ids),
                               word_vocab.sos_id, word_vocab.eos_id)
    return beam_search(scorer, gamma, max_len)[0]


def units_to_words_lowerbound(reference_units, references, word_model,
                              word_vocab, gamma, max_len=100,
                              scoring_fn=None):
    """Decode ground-truth unit sequences through the unit->word model and
    score against the reference transcripts: the stage-2-only error floor.

    reference_units / references: dicts keyed by utterance id.
    scoring_fn(hyps, refs) defaults to evaluation.cer.
    """
    if scoring_fn is None:
        from .evaluation import cer
        scoring_fn = cer
    hyps = {}
    for utt_id, unit_ids in reference_units.items():
        hyp = units_to_words(word_model, unit_ids, word_vocab, gamma,
                             max_len=max_len)
        hyps[utt_id] = " ".join(word_vocab.decode(hyp.tokens))
    return scoring_fn(hyps, references)
