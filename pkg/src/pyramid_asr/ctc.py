"""CTC loss, a brute-force path oracle, greedy decoding and character error rate."""

import itertools

import numpy as np

from .errors import CTCInfeasibleError
from .tensor import Tensor, make_node

BLANK = 0
NEG_INF = -1e30


def extend_with_blanks(labels):
    ext = np.full(2 * len(labels) + 1, BLANK, dtype=np.int64)
    ext[1::2] = labels
    return ext


def min_frames(labels):
    """Shortest frame count that can emit ``labels``: one per token plus a blank between repeats."""
    labels = list(labels)
    return len(labels) + sum(a == b for a, b in zip(labels, labels[1:]))


def _check_labels(labels, V):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 1 or labels.max() >= V):
        raise ValueError(f"label ids must lie in [1, {V - 1}]; 0 is the blank")
    return labels


def _shift_right(v, k):
    out = np.full_like(v, NEG_INF)
    if k < len(v):
        out[k:] = v[:len(v) - k]
    return out


def _shift_left(v, k):
    out = np.full_like(v, NEG_INF)
    if k < len(v):
        out[:len(v) - k] = v[k:]
    return out


def _logsumexp3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    return m + np.log(np.exp(a - m) + np.exp(b - m) + np.exp(c - m))


def _lattices(lp, ext):
    """Log alpha and log beta over the blank-interleaved labels; both include the frame's emission."""
    T, S = lp.shape[0], len(ext)
    emit = lp[:, ext]
    # s-2 transition allowed only onto a non-blank that differs from the label two back
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        one = _shift_right(prev, 1)
        two = np.where(skip, _shift_right(prev, 2), NEG_INF)
        alpha[t] = _logsumexp3(prev, one, two) + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_from = np.zeros(S, dtype=bool)
    skip_from[:max(0, S - 2)] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        one = _shift_left(nxt, 1)
        two = np.where(skip_from, _shift_left(nxt, 2), NEG_INF)
        beta[t] = _logsumexp3(nxt, one, two) + emit[t]
    return alpha, beta


def ctc_forward(log_probs, labels):
    """Log-likelihood and log-alpha lattice ``[T, 2L+1]`` for one utterance (plain numpy)."""
    lp = np.asarray(log_probs, dtype=np.float64)
    labels = _check_labels(labels, lp.shape[1])
    T = lp.shape[0]
    if T < min_frames(labels):
        raise CTCInfeasibleError(
            f"sequence too short for label: T={T} frames cannot emit L={len(labels)} tokens "
            f"(needs at least {min_frames(labels)})")
    ext = extend_with_blanks(labels)
    alpha, _ = _lattices(lp, ext)
    ll = np.logaddexp(alpha[-1, -1], alpha[-1, -2]) if len(ext) > 1 else alpha[-1, -1]
    return float(ll), alpha


def ctc_loss(log_probs, labels):
    """Negative log-likelihood of ``labels`` under per-frame log-probabilities ``[T, V]``.

    Differentiable with respect to ``log_probs``; the gradient comes from the
    alpha-beta occupation probabilities.
    """
    if not isinstance(log_probs, Tensor):
        log_probs = Tensor(log_probs)
    lp = log_probs.data.astype(np.float64)
    labels = _check_labels(labels, lp.shape[1])
    T = lp.shape[0]
    if T < min_frames(labels):
        raise CTCInfeasibleError(
            f"sequence too short for label: T={T} frames cannot emit L={len(labels)} tokens "
            f"(needs at least {min_frames(labels)})")
    ext = extend_with_blanks(labels)
    alpha, beta = _lattices(lp, ext)
    S = len(ext)
    ll = np.logaddexp(alpha[-1, -1], alpha[-1, -2]) if S > 1 else alpha[-1, -1]

    def backward(g):
        # occupancy of state s at frame t, divided by that frame's emission once
        occ = np.exp(alpha + beta - lp[:, ext] - ll)
        grad = np.zeros_like(lp)
        np.add.at(grad, (slice(None), ext), occ)
        return ((-g * grad).astype(log_probs.dtype),)

    return make_node(np.asarray(-ll, dtype=log_probs.dtype), (log_probs,), backward)


def ctc_loss_batch(log_probs, lengths, labels):
    """Mean CTC loss over a padded batch ``[B, T, V]``; frames past ``lengths[b]`` are ignored."""
    lp_all = log_probs.data.astype(np.float64)
    B, _, V = lp_all.shape
    parts = []
    total = 0.0
    for b in range(B):
        T = int(lengths[b])
        lab = _check_labels(labels[b], V)
        if T < min_frames(lab):
            raise CTCInfeasibleError(
                f"sequence too short for label: T={T} frames cannot emit L={len(lab)} tokens "
                f"(needs at least {min_frames(lab)})")
        ext = extend_with_blanks(lab)
        lp = lp_all[b, :T]
        alpha, beta = _lattices(lp, ext)
        ll = np.logaddexp(alpha[-1, -1], alpha[-1, -2]) if len(ext) > 1 else alpha[-1, -1]
        parts.append((T, ext, alpha, beta, ll))
        total -= ll

    def backward(g):
        grad = np.zeros_like(lp_all)
        for b, (T, ext, alpha, beta, ll) in enumerate(parts):
            occ = np.exp(alpha + beta - lp_all[b, :T][:, ext] - ll)
            np.add.at(grad[b], (slice(0, T), ext), occ)
        return ((-g / B * grad).astype(log_probs.dtype),)

    return make_node(np.asarray(total / B, dtype=log_probs.dtype), (log_probs,), backward)


def collapse(path):
    """Merge repeats, then drop blanks."""
    out = []
    prev = None
    for tok in path:
        if tok != prev and tok != BLANK:
            out.append(int(tok))
        prev = tok
    return out


def ctc_loss_bruteforce(log_probs, labels, max_paths=10**7):
    """Sum path probabilities over all ``V**T`` frame paths that collapse to ``labels``.

    Returns ``inf`` when no path collapses to the label.
    """
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    T, V = lp.shape
    if V ** T > max_paths:
        raise ValueError(f"{V}^{T} paths exceeds the enumeration guard of {max_paths}")
    target = [int(x) for x in labels]
    terms = [sum(lp[t, k] for t, k in enumerate(path))
             for path in itertools.product(range(V), repeat=T) if collapse(path) == target]
    if not terms:
        return float("inf")
    terms = np.array(terms)
    m = terms.max()
    return float(-(m + np.log(np.exp(terms - m).sum())))


def greedy_decode(log_probs):
    """Best path: per-frame argmax (ties to the lowest id), merge repeats, drop blanks."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return collapse(np.argmax(lp, axis=-1))


def edit_distance(a, b):
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def cer(hyp, ref):
    """Levenshtein distance over tokens divided by the reference length."""
    if len(ref) == 0:
        raise ValueError("CER is undefined for an empty reference")
    return edit_distance(hyp, ref) / len(ref)


def corpus_cer(hyps, refs):
    """Total edits over total reference tokens."""
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("CER is undefined for an empty reference corpus")
    return sum(edit_distance(h, r) for h, r in zip(hyps, refs)) / total


# -- vocabulary --------------------------------------------------------------

def read_vocab(path):
    """One token per line; line ``i`` (1-based) is token id ``i``; id 0 is the implicit blank."""
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    if len(set(tokens)) != len(tokens):
        raise ValueError(f"{path}: duplicate tokens")
    return tokens


def write_vocab(path, tokens):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(t + "\n" for t in tokens))


def encode(text, tokens):
    """Space-separated transcript to ids."""
    index = {t: i + 1 for i, t in enumerate(tokens)}
    try:
        return [index[t] for t in text.split()]
    except KeyError as exc:
        raise ValueError(f"token {exc.args[0]!r} not in vocabulary") from None


def decode_ids(ids, tokens):
    return " ".join(tokens[i - 1] for i in ids)
