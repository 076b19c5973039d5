"""Shared test utilities: finite-difference gradient checking and toy
sequence scorers."""

import numpy as np

from cascade_asr.tensor import GradientTape, Tensor


def numeric_gradient(f, x, h=1e-4):
    """Central finite differences of scalar f w.r.t. array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float((np.abs(analytic - numeric) / denom).max())


def gradcheck(build_loss, tensors, h=1e-4, tol=1e-3, sample=None, rng=None):
    """Compare tape gradients of build_loss() against central differences.

    build_loss must rebuild the loss from the tensors' current .data each
    call.  sample limits the number of probed elements per tensor.
    """
    with GradientTape() as tape:
        loss = build_loss()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = tape.gradient(t)
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            rng = rng or np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=sample, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = build_loss().item()
            flat[i] = orig - h
            fm = build_loss().item()
            flat[i] = orig
            gn = (fp - fm) / (2 * h)
            ga = analytic.reshape(-1)[i]
            worst = max(worst, max_rel_err(np.float64(ga), np.float64(gn)))
    assert worst < tol, f"gradient check failed: max rel err {worst}"
    return worst


class TableScorer:
    """Deterministic toy scorer for beam-search tests: next-token log-probs
    are a pure function of the prefix, drawn from a seeded rng."""

    def __init__(self, vocab_size, seed, sos_id=0, eos_id=1):
        self.vocab_size = vocab_size
        self.seed = seed
        self.sos_id = sos_id
        self.eos_id = eos_id
        self._cache = {}

    def next_logprobs(self, prefix_ids):
        key = tuple(prefix_ids)
        if key not in self._cache:
            rng = np.random.default_rng([self.seed, *[t + 1 for t in key]])
            logits = rng.normal(size=self.vocab_size)
            self._cache[key] = logits - np.log(np.exp(logits).sum())
        return self._cache[key]


def exhaustive_best(scorer, max_len):
    """Enumerate every generation of up to max_len tokens; returns the
    best finished (tokens, logprob) mirroring beam-search tie-breaking."""
    best = None

    def visit(prefix, logprob, depth):
        nonlocal best
        if depth == max_len:
            return
        logp = scorer.next_logprobs(prefix)
        for tok in range(scorer.vocab_size):
            seq = prefix + [tok]
            lp = logprob + float(logp[tok])
            if tok == scorer.eos_id:
                cand = (lp, seq)
                if best is None or (-cand[0], len(cand[1]),
                                    tuple(cand[1])) < (-best[0],
                                                       len(best[1]),
                                                       tuple(best[1])):
                    best = cand
            else:
                visit(seq, lp, depth + 1)

    visit([scorer.sos_id], 0.0, 0)
    return best
