"""Character error rate scoring and attention-matrix export."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError


@dataclass
class ScoredPair:
    utterance_id: str
    reference: str
    hypothesis: str
    substitutions: int
    deletions: int
    insertions: int
    missing: bool = False

    @property
    def errors(self):
        return self.substitutions + self.deletions + self.insertions


def edit_counts(hyp, ref):
    """Minimal (substitutions, deletions, insertions) aligning hyp to ref,
    by Levenshtein DP with unit costs and backtrace.

    Deletion = reference symbol absent from the hypothesis.
    """
    nh, nr = len(hyp), len(ref)
    # dist[i][j]: cost of aligning hyp[:i] with ref[:j]
    dist = [[0] * (nr + 1) for _ in range(nh + 1)]
    for i in range(nh + 1):
        dist[i][0] = i
    for j in range(nr + 1):
        dist[0][j] = j
    for i in range(1, nh + 1):
        hi = hyp[i - 1]
        row, above = dist[i], dist[i - 1]
        for j in range(1, nr + 1):
            row[j] = min(above[j - 1] + (hi != ref[j - 1]),
                         row[j - 1] + 1, above[j] + 1)
    s = d = ins = 0
    i, j = nh, nr
    while i > 0 or j > 0:
        if i > 0 and j > 0 and \
                dist[i][j] == dist[i - 1][j - 1] + (hyp[i - 1] != ref[j - 1]):
            s += hyp[i - 1] != ref[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and dist[i][j] == dist[i][j - 1] + 1:
            d += 1
            j -= 1
        else:
            ins += 1
            i -= 1
    return s, d, ins


def _chars(text):
    # Mandarin scoring convention: characters with whitespace removed
    return "".join(text.split())


def cer(hypotheses, references):
    """CER percentage plus per-utterance scored pairs.

    hypotheses / references: dicts keyed by utterance id.  A missing
    hypothesis counts as all deletions and is flagged.
    """
    if not references:
        raise ContractError("no references to score against")
    pairs = []
    total_err, total_ref = 0, 0
    for utt_id in sorted(references):
        ref = _chars(references[utt_id])
        if utt_id in hypotheses:
            hyp = _chars(hypotheses[utt_id])
            s, d, i = edit_counts(hyp, ref)
            missing = False
        else:
            hyp, (s, d, i), missing = "", (0, len(ref), 0), True
        pairs.append(ScoredPair(utterance_id=utt_id, reference=ref,
                                hypothesis=hyp, substitutions=int(s),
                                deletions=int(d), insertions=int(i),
                                missing=missing))
        total_err += pairs[-1].errors
        total_ref += len(ref)
    if total_ref == 0:
        raise ContractError("references are empty")
    return 100.0 * total_err / total_ref, pairs


def write_score_report(path, cer_pct, pairs):
    """Delimited report: global CER then per-utterance S/D/I."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"#CER\t{cer_pct:.4f}\n")
        f.write("utterance_id\tsub\tdel\tins\tref_len\tflag\n")
        for p in pairs:
            flag = "missing" if p.missing else "ok"
            f.write(f"{p.utterance_id}\t{p.substitutions}\t{p.deletions}"
                    f"\t{p.insertions}\t{len(p.reference)}\t{flag}\n")


def capture_attention(model, inputs, prefix_ids, layer, head, kind):
    """Post-softmax attention weights from one forward pass.

    kind: enc_self | dec_self | dec_cross.  Rows are queries, columns keys.
    """
    cfg = model.cfg
    if not 0 <= layer < cfg.n_layers:
        raise ConfigError(f"layer {layer} out of range (N={cfg.n_layers})")
    if not 0 <= head < cfg.n_heads:
        raise ConfigError(f"head {head} out of range (h={cfg.n_heads})")
    if kind not in ("enc_self", "dec_self", "dec_cross"):
        raise ConfigError(f"unknown attention kind {kind!r}")
    collector = {}
    memory = model.encode(inputs, collector=collector)
    if kind != "enc_self":
        model.decoder_logprobs(memory, prefix_ids, collector=collector)
    return collector[(kind, layer, head)]


def write_pgm(path, matrix):
    """8-bit portable graymap; 1.0 maps to white."""
    m = np.clip(np.asarray(matrix, dtype=np.float64), 0.0, 1.0)
    pix = np.round(m * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii"))
        f.write(pix.tobytes())


def write_matrix_text(path, matrix):
    np.savetxt(path, np.asarray(matrix), fmt="%.8e", delimiter="\t")


def dump_attention(model, inputs, prefix_ids, layer, head, kind, base_path,
                   render_figure=True):
    """Export one attention matrix as delimited text + PGM image (and a
    rendered heatmap when matplotlib output is wanted).

    Returns (matrix, list of files written).
    """
    matrix = capture_attention(model, inputs, prefix_ids, layer, head, kind)
    txt = str(base_path) + ".txt"
    pgm = str(base_path) + ".pgm"
    write_matrix_text(txt, matrix)
    write_pgm(pgm, matrix)
    written = [txt, pgm]
    if render_figure:
        written.append(render_attention_figure(
            matrix, str(base_path) + ".png",
            title=f"{kind} layer {layer} head {head}"))
    return matrix, written


def render_attention_figure(matrix, path, title=""):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(matrix, aspect="auto", origin="upper",
                   interpolation="nearest", cmap="viridis")
    ax.set_xlabel("key position")
    ax.set_ylabel("query position")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_loss_figure(log_rows, path, title="training loss"):
    """Loss-vs-step curve for a training log [(step, lr, loss), ...]."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [r[0] for r in log_rows]
    losses = [r[2] for r in log_rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_cer_figure(pairs, path, title="per-utterance errors"):
    """Bar chart of per-utterance error counts next to the score report."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ids = [p.utterance_id for p in pairs]
    errs = [p.errors for p in pairs]
    fig, ax = plt.subplots(figsize=(max(6, 0.3 * len(ids)), 4))
    ax.bar(range(len(ids)), errs)
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels(ids, rotation=90, fontsize=6)
    ax.set_ylabel("S + D + I")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
