"""Command-line entry point for the full pipeline.

Subcommands: features, prep-vocab, train, decode, lowerbound, score,
dump-attention.  Every subcommand is deterministic under a fixed seed and
writes its effective configuration next to its outputs.
"""

from __future__ import annotations

import os
import sys

import click
import numpy as np

from . import evaluation, lexicon as lex_mod, pipeline
from .decoding import CascadeConfig
from .errors import ConfigError
from .frontend import FrontendConfig, read_feature_file
from .training import TrainConfig
from .transformer import Transformer


@click.group()
def main():
    """Two-stage Transformer speech recognizer (audio -> units -> words)."""


def _write_effective(run_dir, name, mapping):
    pipeline.ensure_layout(run_dir)
    pipeline.write_config(os.path.join(run_dir, f"{name}_config.txt"),
                          mapping)


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--frame-factor", default="3", show_default=True,
              type=click.Choice(["3", "5", "7"]),
              help="Downsampling factor; 3/5/7 give 30/50/70 ms frames.")
@click.option("--speed-perturb/--no-speed-perturb", default=False,
              help="Also cache 0.9x and 1.1x copies of each utterance.")
@click.option("--n-mels", default=80, show_default=True)
@click.option("--left-stack", default=3, show_default=True)
@click.option("--jobs", default=1, show_default=True)
def features(manifest, run_dir, frame_factor, speed_perturb, n_mels,
             left_stack, jobs):
    """Extract and cache stacked, normalized log-Mel features."""
    cfg = FrontendConfig(n_mels=n_mels, left_stack=left_stack,
                         downsample_factor=int(frame_factor))
    written, errors = pipeline.extract_all_features(
        manifest, run_dir, cfg, speed_perturb=speed_perturb, jobs=jobs)
    _write_effective(run_dir, "features", {
        "manifest": manifest, "frame_factor": frame_factor,
        "speed_perturb": speed_perturb, "n_mels": n_mels,
        "left_stack": left_stack,
        "frame_shift_ms": 10.0 * int(frame_factor)})
    click.echo(f"cached {len(written)} feature files, "
               f"{len(errors)} errors")
    for utt_id, msg in errors:
        click.echo(f"  error {utt_id}: {msg}", err=True)
    if errors:
        sys.exit(1)


@main.command("prep-vocab")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--lexicon", "lexicon_path", required=True,
              type=click.Path(exists=True))
@click.option("--syllable-table", required=True, type=click.Path(exists=True))
@click.option("--unit-level", required=True,
              type=click.Choice(["syllable", "phoneme"]))
@click.option("--run-dir", required=True, type=click.Path())
def prep_vocab(manifest, lexicon_path, syllable_table, unit_level, run_dir):
    """Build and dump the unit and word vocabularies."""
    unit_vocab, word_vocab = pipeline.prepare_vocabs(
        manifest, lexicon_path, syllable_table, unit_level, run_dir)
    _write_effective(run_dir, "vocab", {
        "manifest": manifest, "lexicon": lexicon_path,
        "syllable_table": syllable_table, "unit_level": unit_level,
        "unit_vocab_size": len(unit_vocab),
        "word_vocab_size": len(word_vocab)})
    click.echo(f"unit vocabulary: {len(unit_vocab)} symbols, "
               f"word vocabulary: {len(word_vocab)} symbols")


def _model_overrides(n_layers, d_model, n_heads, d_k, d_v, d_ff, warmup):
    out = {}
    for key, val in [("n_layers", n_layers), ("d_model", d_model),
                     ("n_heads", n_heads), ("d_k", d_k), ("d_v", d_v),
                     ("d_ff", d_ff), ("warmup_steps", warmup)]:
        if val is not None:
            out[key] = val
    return out


@main.command()
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--stage", required=True,
              type=click.Choice(["acoustic", "word"]))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--lexicon", "lexicon_path", required=True,
              type=click.Path(exists=True))
@click.option("--syllable-table", required=True, type=click.Path(exists=True))
@click.option("--unit-level", default="syllable", show_default=True,
              type=click.Choice(["syllable", "phoneme"]))
@click.option("--preset", default=None,
              help="D512-H8 | D1024-H16 | custom "
                   "(word stage defaults to D512-H8).")
@click.option("--n-layers", type=int, default=None)
@click.option("--d-model", type=int, default=None)
@click.option("--n-heads", type=int, default=None)
@click.option("--d-k", type=int, default=None)
@click.option("--d-v", type=int, default=None)
@click.option("--d-ff", type=int, default=None)
@click.option("--warmup", type=int, default=None)
@click.option("--dropout", type=float, default=0.1, show_default=True)
@click.option("--steps", default=1000, show_default=True)
@click.option("--batch-size", default=16, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--lr-scale", default=1.0, show_default=True)
@click.option("--checkpoint-interval", default=0, show_default=True)
@click.option("--resume", is_flag=True, default=False)
@click.option("--include-perturbed/--no-include-perturbed", default=True)
def train(run_dir, stage, manifest, lexicon_path, syllable_table,
          unit_level, preset, n_layers, d_model, n_heads, d_k, d_v, d_ff,
          warmup, dropout, steps, batch_size, seed, lr_scale,
          checkpoint_interval, resume, include_perturbed):
    """Train the acoustic (features->units) or word (units->words) model."""
    if preset is None:
        preset = "D512-H8"  # the text model is only trained at base size
    lex = lex_mod.load_lexicon(lexicon_path, syllable_table)
    unit_vocab, word_vocab = pipeline.load_vocabs(run_dir)
    overrides = _model_overrides(n_layers, d_model, n_heads, d_k, d_v,
                                 d_ff, warmup)
    overrides["dropout_rate"] = dropout
    if stage == "acoustic":
        dataset = pipeline.build_acoustic_dataset(
            manifest, run_dir, lex, unit_level, unit_vocab,
            include_perturbed=include_perturbed)
        if not dataset:
            raise ConfigError("no cached features found; run `features` "
                              "first")
        input_dim = dataset[0][0].shape[1]
        model_cfg = pipeline.make_model_config(
            preset, len(unit_vocab), input_dim=input_dim,
            overrides=overrides)
        pad_id = unit_vocab.pad_id
    else:
        dataset = pipeline.build_word_dataset(
            manifest, lex, unit_level, unit_vocab, word_vocab)
        model_cfg = pipeline.make_model_config(
            preset, len(word_vocab), input_vocab_size=len(unit_vocab),
            overrides=overrides)
        pad_id = word_vocab.pad_id
    train_cfg = TrainConfig(batch_size=batch_size, max_steps=steps,
                            seed=seed, lr_scale=lr_scale,
                            checkpoint_interval=checkpoint_interval)
    model = Transformer(model_cfg, seed=seed, dtype=np.float32)
    log, model = pipeline.train_stage(run_dir, stage, model, dataset,
                                      train_cfg, pad_id, resume=resume)
    _write_effective(run_dir, f"train_{stage}", {
        "stage": stage, "manifest": manifest, "lexicon": lexicon_path,
        "syllable_table": syllable_table, "unit_level": unit_level,
        "preset": preset, "steps": steps, "batch_size": batch_size,
        "seed": seed, "lr_scale": lr_scale, "dropout": dropout,
        **{k: v for k, v in overrides.items()}})
    final = log[-1][2] if log else float("nan")
    click.echo(f"trained {stage} model for {len(log)} steps, "
               f"final loss {final:.4f}")


@main.command()
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--beta", default=13, show_default=True,
              help="Stage-1 (features->units) beam size.")
@click.option("--gamma", default=6, show_default=True,
              help="Stage-2 (units->words) beam size.")
@click.option("--max-len-units", default=200, show_default=True)
@click.option("--max-len-words", default=100, show_default=True)
@click.option("--jobs", default=1, show_default=True)
def decode(run_dir, manifest, beta, gamma, max_len_units, max_len_words,
           jobs):
    """Cascade-decode a manifest and score CER against its transcripts."""
    cfg = CascadeConfig(beta=beta, gamma=gamma,
                        max_len_units=max_len_units,
                        max_len_words=max_len_words)
    cer_pct, decode_path, report = pipeline.decode_manifest(
        run_dir, manifest, cfg, jobs=jobs)
    _write_effective(run_dir, "decode", {
        "manifest": manifest, "beta": beta, "gamma": gamma,
        "max_len_units": max_len_units, "max_len_words": max_len_words})
    click.echo(f"decoded to {decode_path}")
    click.echo(f"CER {cer_pct:.2f}% -> {report}")


@main.command()
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--lexicon", "lexicon_path", required=True,
              type=click.Path(exists=True))
@click.option("--syllable-table", required=True, type=click.Path(exists=True))
@click.option("--unit-level", default="syllable", show_default=True,
              type=click.Choice(["syllable", "phoneme"]))
@click.option("--gamma", default=6, show_default=True)
@click.option("--max-len-words", default=100, show_default=True)
def lowerbound(run_dir, manifest, lexicon_path, syllable_table, unit_level,
               gamma, max_len_words):
    """Stage-2-only CER floor from ground-truth unit sequences."""
    lex = lex_mod.load_lexicon(lexicon_path, syllable_table)
    cer_pct, report = pipeline.lowerbound_manifest(
        run_dir, manifest, lex, unit_level, gamma, max_len=max_len_words)
    _write_effective(run_dir, "lowerbound", {
        "manifest": manifest, "unit_level": unit_level, "gamma": gamma})
    click.echo(f"lower-bound CER {cer_pct:.2f}% -> {report}")


@main.command()
@click.option("--hyp", required=True, type=click.Path(exists=True),
              help="TSV: utterance_id <tab> hypothesis text.")
@click.option("--ref", required=True, type=click.Path(exists=True),
              help="TSV: utterance_id <tab> reference text.")
@click.option("--out", required=True, type=click.Path(),
              help="Report path; a .png figure lands next to it.")
def score(hyp, ref, out):
    """Score CER of a hypothesis file against a reference file."""

    def read_pairs(path):
        pairs = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                utt_id, _, text = line.partition("\t")
                pairs[utt_id] = text
        return pairs

    cer_pct, pairs = evaluation.cer(read_pairs(hyp), read_pairs(ref))
    evaluation.write_score_report(out, cer_pct, pairs)
    evaluation.render_cer_figure(pairs, os.path.splitext(out)[0] + ".png",
                                 title=f"CER {cer_pct:.2f}%")
    click.echo(f"CER {cer_pct:.2f}% -> {out}")


@main.command("dump-attention")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--feature-file", type=click.Path(exists=True), default=None,
              help="Cached features (acoustic model input).")
@click.option("--input-ids", default=None,
              help="Comma-separated token ids (text model input).")
@click.option("--prefix-ids", default=None,
              help="Comma-separated decoder prefix ids "
                   "(required for dec_self / dec_cross).")
@click.option("--layer", default=0, show_default=True)
@click.option("--head", default=0, show_default=True)
@click.option("--kind", default="enc_self", show_default=True,
              type=click.Choice(["enc_self", "dec_self", "dec_cross"]))
@click.option("--out", required=True, type=click.Path(),
              help="Output base path (.txt, .pgm and .png are appended).")
def dump_attention(ckpt, feature_file, input_ids, prefix_ids, layer, head,
                   kind, out):
    """Export one post-softmax attention matrix from a forward pass."""
    model, _, _ = Transformer.load_checkpoint(ckpt, dtype=np.float64)
    if feature_file is not None:
        inputs = read_feature_file(feature_file).frames
    elif input_ids is not None:
        inputs = [int(t) for t in input_ids.split(",")]
    else:
        raise ConfigError("one of --feature-file / --input-ids is required")
    prefix = [int(t) for t in prefix_ids.split(",")] if prefix_ids else [0]
    _, written = evaluation.dump_attention(model, inputs, prefix, layer,
                                           head, kind, out)
    for path in written:
        click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
