"""Run-directory orchestration shared by the CLI and the tests.

A run directory has a fixed layout:

    run/
      features/     per-utterance binary feature cache (+ errors.txt)
      vocab/        units.vocab, words.vocab
      ckpt/         acoustic.ckpt, word.ckpt
      decode/       decode.tsv
      reports/      delimited reports and rendered figures
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import frontend, lexicon as lex_mod, training, decoding, evaluation
from .data import read_manifest
from .errors import ConfigError
from .frontend import FrontendConfig
from .lexicon import Vocabulary, transcript_to_units
from .training import TrainConfig
from .transformer import ModelConfig, Transformer

SPEED_FACTORS = (0.9, 1.1)
SUBDIRS = ("features", "vocab", "ckpt", "decode", "reports")


def ensure_layout(run_dir):
    for sub in SUBDIRS:
        os.makedirs(os.path.join(run_dir, sub), exist_ok=True)
    return run_dir


def feature_path(run_dir, utterance_id):
    return os.path.join(run_dir, "features", utterance_id + ".feat")


def vocab_path(run_dir, kind):
    return os.path.join(run_dir, "vocab", kind + ".vocab")


def ckpt_path(run_dir, stage):
    return os.path.join(run_dir, "ckpt", stage + ".ckpt")


def write_config(path, mapping):
    """Key-value text config; deterministic ordering."""
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(mapping):
            f.write(f"{key} = {mapping[key]}\n")


def read_config(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


# -- features --------------------------------------------------------------

def extract_all_features(manifest_path, run_dir, cfg: FrontendConfig,
                         speed_perturb=False, jobs=1):
    """log-Mel -> per-speaker CMVN -> stack/downsample, cached per
    utterance.  Perturbed copies get `_sp0.9` / `_sp1.1` id suffixes.

    Returns (written ids, error records); per-utterance failures are
    recorded, not fatal.
    """
    ensure_layout(run_dir)
    records = read_manifest(manifest_path)
    errors = []

    def load_one(rec):
        out = []
        try:
            audio = frontend.read_wav(rec.wav_path)
            variants = [(rec.utterance_id, audio)]
            if speed_perturb:
                for f in SPEED_FACTORS:
                    variants.append((f"{rec.utterance_id}_sp{f}",
                                     frontend.speed_perturb(audio, f)))
            for utt_id, sig in variants:
                fm = frontend.log_mel(sig, cfg)
                fm.utterance_id = utt_id
                fm.speaker_id = rec.speaker_id
                out.append(fm)
        except Exception as exc:  # record and continue with the rest
            return rec.utterance_id, None, f"{type(exc).__name__}: {exc}"
        return rec.utterance_id, out, None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(load_one, records))
    else:
        results = [load_one(r) for r in records]

    features = []
    for utt_id, fms, err in results:
        if err is not None:
            errors.append((utt_id, err))
        else:
            features.extend(fms)
    features = frontend.cmvn_by_speaker(features)
    written = []
    for fm in features:
        stacked = frontend.stack_and_downsample(fm, cfg.left_stack,
                                                cfg.downsample_factor)
        frontend.write_feature_file(feature_path(run_dir, fm.utterance_id),
                                    stacked)
        written.append(fm.utterance_id)
    err_path = os.path.join(run_dir, "features", "errors.txt")
    with open(err_path, "w", encoding="utf-8") as f:
        for utt_id, msg in errors:
            f.write(f"{utt_id}\t{msg}\n")
    return written, errors


# -- vocabularies ----------------------------------------------------------

def prepare_vocabs(manifest_path, lexicon_path, syllable_table_path,
                   unit_level, run_dir):
    """Unit vocabulary from the lexicon inventory, word vocabulary from the
    training transcripts; both dumped one symbol per line."""
    ensure_layout(run_dir)
    lex = lex_mod.load_lexicon(lexicon_path, syllable_table_path)
    if unit_level == "syllable":
        units = lex.syllable_inventory()
    elif unit_level == "phoneme":
        units = lex.phoneme_inventory()
    else:
        raise ConfigError(f"unit level must be syllable or phoneme, "
                          f"got {unit_level!r}")
    unit_vocab = lex_mod.build_vocab(units)
    words = sorted({w for rec in read_manifest(manifest_path)
                    for w in rec.words})
    word_vocab = lex_mod.build_vocab(words)
    unit_vocab.save(vocab_path(run_dir, "units"))
    word_vocab.save(vocab_path(run_dir, "words"))
    return unit_vocab, word_vocab


def load_vocabs(run_dir):
    return (Vocabulary.load(vocab_path(run_dir, "units")),
            Vocabulary.load(vocab_path(run_dir, "words")))


# -- datasets --------------------------------------------------------------

def build_acoustic_dataset(manifest_path, run_dir, lex, unit_level,
                           unit_vocab, include_perturbed=True):
    """(feature frames, unit token ids) pairs from the feature cache."""
    dataset = []
    for rec in read_manifest(manifest_path):
        units = transcript_to_units(rec.words, lex, unit_level, unit_vocab)
        ids = [rec.utterance_id]
        if include_perturbed:
            ids += [f"{rec.utterance_id}_sp{f}" for f in SPEED_FACTORS]
        for utt_id in ids:
            path = feature_path(run_dir, utt_id)
            if not os.path.exists(path):
                continue
            fm = frontend.read_feature_file(path, utterance_id=utt_id)
            dataset.append((fm.frames, list(units.ids)))
    return dataset


def build_word_dataset(manifest_path, lex, unit_level, unit_vocab,
                       word_vocab):
    """(unit id sequence, word token ids) pairs derived from transcripts."""
    dataset = []
    for rec in read_manifest(manifest_path):
        units = transcript_to_units(rec.words, lex, unit_level, unit_vocab)
        words = word_vocab.encode(rec.words)
        dataset.append((list(units.ids), list(words.ids)))
    return dataset


# -- training --------------------------------------------------------------

def make_model_config(preset, output_vocab_size, input_dim=0,
                      input_vocab_size=0, overrides=None):
    overrides = overrides or {}
    if preset == "custom":
        return ModelConfig(output_vocab_size=output_vocab_size,
                           input_dim=input_dim,
                           input_vocab_size=input_vocab_size, **overrides)
    return ModelConfig.from_preset(preset, output_vocab_size,
                                   input_dim=input_dim,
                                   input_vocab_size=input_vocab_size,
                                   **overrides)


def train_stage(run_dir, stage, model, dataset, train_cfg: TrainConfig,
                pad_id, resume=False, callback=None, dtype=np.float32):
    """Train one stage; writes the checkpoint, loss log and loss figure.

    Returns the loss log rows.
    """
    ensure_layout(run_dir)
    path = ckpt_path(run_dir, stage)
    state, start_step = None, 0
    if resume:
        model, extra, meta = Transformer.load_checkpoint(path, dtype=dtype)
        start_step = int(meta.get("step", 0))
        state = training.adam_state_from_extra(extra, model.params,
                                               start_step)

    def checkpoint_fn(step, st):
        model.save_checkpoint(path, extra=training.adam_state_to_extra(st),
                              meta={"step": step, "seed": train_cfg.seed})

    log_path = os.path.join(run_dir, "reports", f"train_{stage}.tsv")
    mode = "a" if resume else "w"
    with open(log_path, mode, encoding="utf-8") as log_file:
        if not resume:
            log_file.write("step\tlr\tloss\n")
        log, _ = training.train(model, dataset, train_cfg, pad_id,
                                state=state, start_step=start_step,
                                log_file=log_file,
                                checkpoint_fn=checkpoint_fn,
                                callback=callback)
    if log:
        evaluation.render_loss_figure(
            log, os.path.join(run_dir, "reports", f"train_{stage}.png"),
            title=f"{stage} training loss")
    return log, model


# -- decoding and scoring --------------------------------------------------

def decode_manifest(run_dir, manifest_path, cascade_cfg, jobs=1,
                    dtype=np.float64):
    """Cascade-decode every manifest utterance from the feature cache;
    writes decode/decode.tsv and a CER report with figures."""
    ensure_layout(run_dir)
    unit_vocab, word_vocab = load_vocabs(run_dir)
    acoustic, _, _ = Transformer.load_checkpoint(
        ckpt_path(run_dir, "acoustic"), dtype=dtype)
    word_model, _, _ = Transformer.load_checkpoint(
        ckpt_path(run_dir, "word"), dtype=dtype)
    records = read_manifest(manifest_path)

    def decode_one(rec):
        fm = frontend.read_feature_file(
            feature_path(run_dir, rec.utterance_id))
        word_hyp, unit_hyp = decoding.cascade_decode(
            acoustic, word_model, fm.frames, unit_vocab, word_vocab,
            cascade_cfg)
        return rec.utterance_id, unit_hyp, word_hyp

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(decode_one, records))
    else:
        results = [decode_one(r) for r in records]

    decode_path = os.path.join(run_dir, "decode", "decode.tsv")
    hyps = {}
    with open(decode_path, "w", encoding="utf-8") as f:
        f.write("utterance_id\tunits\twords\tunit_logprob\tword_logprob"
                "\tflag\n")
        for utt_id, unit_hyp, word_hyp in results:
            units = " ".join(unit_vocab.decode(unit_hyp.tokens))
            words = " ".join(word_vocab.decode(word_hyp.tokens))
            hyps[utt_id] = words
            flag = "truncated" if word_hyp.truncated else "ok"
            f.write(f"{utt_id}\t{units}\t{words}\t{unit_hyp.logprob:.6f}"
                    f"\t{word_hyp.logprob:.6f}\t{flag}\n")
    refs = {rec.utterance_id: rec.transcript for rec in records}
    cer_pct, pairs = evaluation.cer(hyps, refs)
    report = os.path.join(run_dir, "reports", "decode_cer.tsv")
    evaluation.write_score_report(report, cer_pct, pairs)
    evaluation.render_cer_figure(
        pairs, os.path.join(run_dir, "reports", "decode_cer.png"),
        title=f"cascade decode, CER {cer_pct:.2f}%")
    return cer_pct, decode_path, report


def lowerbound_manifest(run_dir, manifest_path, lex, unit_level, gamma,
                        max_len=100, dtype=np.float64):
    """Stage-2-only error floor: ground-truth unit sequences through the
    unit->word model, scored against the reference transcripts."""
    ensure_layout(run_dir)
    unit_vocab, word_vocab = load_vocabs(run_dir)
    word_model, _, _ = Transformer.load_checkpoint(
        ckpt_path(run_dir, "word"), dtype=dtype)
    records = read_manifest(manifest_path)
    reference_units = {
        rec.utterance_id: list(transcript_to_units(
            rec.words, lex, unit_level, unit_vocab).ids)
        for rec in records}
    refs = {rec.utterance_id: rec.transcript for rec in records}
    cer_pct, pairs = decoding.units_to_words_lowerbound(
        reference_units, refs, word_model, word_vocab, gamma,
        max_len=max_len)
    report = os.path.join(run_dir, "reports", "lowerbound_cer.tsv")
    evaluation.write_score_report(report, cer_pct, pairs)
    evaluation.render_cer_figure(
        pairs, os.path.join(run_dir, "reports", "lowerbound_cer.png"),
        title=f"stage-2 lower bound, CER {cer_pct:.2f}%")
    return cer_pct, report
