"""CTC loss over the blank-interleaved label lattice, plus decoding.

Provides the exact forward-backward loss and its gradient, a brute-force
path-enumeration oracle, greedy and prefix beam decoding (optionally with
shallow n-gram LM fusion), and the add-k smoothed n-gram LM itself.

Blank is vocabulary index 0 everywhere.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from . import lattice as _lattice
from .autodiff import GraphError, Tensor

BLANK = 0
BOS = "<s>"


class InfeasibleLength(ValueError):
    """The frame count cannot carry the label sequence through the lattice."""


def min_frames(y) -> int:
    """Fewest frames that admit any alignment for ``y`` (repeats need a blank)."""
    reps = sum(1 for a, b in zip(y, y[1:]) if a == b)
    return len(y) + reps


def extended_labels(y) -> np.ndarray:
    """Blank-interleave ``y``: [blank, y0, blank, y1, ..., blank], length 2L+1."""
    ext = np.zeros(2 * len(y) + 1, dtype=np.int32)
    ext[1::2] = np.asarray(list(y), dtype=np.int32)
    return ext


def _validate_labels(y, vocab_size: int) -> list[int]:
    out = []
    for v in y:
        iv = int(v)
        if iv != v:
            raise ValueError(f"label {v!r} is not an integer index")
        if iv == BLANK or not (0 < iv < vocab_size):
            raise ValueError(f"label index {iv} invalid for vocab size {vocab_size} (blank=0 excluded)")
        out.append(iv)
    return out


def _validate_posteriors(post) -> np.ndarray:
    post = np.asarray(post, dtype=np.float64)
    if post.ndim != 2 or post.shape[0] < 1 or post.shape[1] < 2:
        raise ValueError(f"posteriors must be (T, V) with V >= 2, got shape {post.shape}")
    if not np.all(np.isfinite(post)):
        raise ValueError("posteriors contain non-finite entries")
    if np.any(post < 0.0) or np.any(post > 1.0 + 1e-9):
        raise ValueError("posterior entries must lie in [0, 1]")
    sums = post.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("posterior rows must sum to 1 within 1e-6")
    return post


@dataclass(frozen=True)
class Lattice:
    """Forward-backward state for one (posteriors, labels) pair.

    ``alpha[t, s]`` includes the emission at frame t; ``beta[t, s]`` covers
    completion strictly after t, so alpha + beta log-sums to ``log_z`` at
    every frame. ``log_z_beta`` recomputes the total from the initial betas.
    """

    ext: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    log_z: float
    log_z_beta: float

    def occupancy(self) -> np.ndarray:
        """gamma[t, s] = P(lattice state s at frame t | y)."""
        if not np.isfinite(self.log_z):
            return np.zeros_like(self.alpha)
        return np.exp(self.alpha + self.beta - self.log_z)


def ctc_lattice(post: np.ndarray, y) -> Lattice:
    post = _validate_posteriors(post)
    y = _validate_labels(y, post.shape[1])
    T = post.shape[0]
    if T < min_frames(y):
        raise InfeasibleLength(
            f"{T} frames cannot align {len(y)} labels (need >= {min_frames(y)})")
    with np.errstate(divide="ignore"):
        lp = np.log(post)
    ext = extended_labels(y)
    log_z, alpha, beta = _lattice.forward_backward(lp, ext)
    em0 = lp[0, ext[: min(2, len(ext))]]
    log_z_beta = float(np.logaddexp.reduce(em0 + beta[0, : len(em0)]))
    return Lattice(ext=ext, alpha=alpha, beta=beta, log_z=log_z, log_z_beta=log_z_beta)


def _scatter_occupancy(lat: Lattice, vocab_size: int) -> np.ndarray:
    """Sum state occupancy into symbol space: out[t, k] = sum_{s: ext[s]=k} gamma[t, s]."""
    occ = lat.occupancy()
    out = np.zeros((occ.shape[0], vocab_size))
    for s, k in enumerate(lat.ext):
        out[:, k] += occ[:, s]
    return out


def ctc_loss(post, y) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``y`` and its gradient w.r.t. logits.

    The gradient assumes ``post`` is the softmax of some logits z, and is
    d(-log P)/dz = post - occupancy. A target with zero total probability
    (possible only when posteriors carry exact zeros) yields loss = +inf and
    the degenerate gradient ``post``.
    """
    lat = ctc_lattice(post, y)
    post = np.asarray(post, dtype=np.float64)
    if not np.isfinite(lat.log_z):
        return math.inf, post.copy()
    grad = post - _scatter_occupancy(lat, post.shape[1])
    return -lat.log_z, grad


def label_logprob(post, y) -> float:
    """log P(y | post); -inf when no alignment exists."""
    post = _validate_posteriors(post)
    y = _validate_labels(y, post.shape[1])
    if post.shape[0] < min_frames(y):
        return -math.inf
    lat = ctc_lattice(post, y)
    return lat.log_z


def ctc_brute_force(post, y) -> float:
    """Loss by enumerating every frame labelling whose collapse equals ``y``.

    Exponential in T; guarded at T <= 8. Returns +inf when no path matches.
    """
    post = _validate_posteriors(post)
    T, V = post.shape
    y = tuple(_validate_labels(y, V))
    if T > 8:
        raise ValueError(f"brute force guard: T={T} exceeds 8")
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        collapsed = []
        prev = -1
        for v in path:
            if v != prev and v != BLANK:
                collapsed.append(v)
            prev = v
        if tuple(collapsed) != y:
            continue
        p = 1.0
        for t, v in enumerate(path):
            p *= post[t, v]
        total += p
    if total <= 0.0:
        return math.inf
    return -math.log(total)


def ctc_node(log_probs: Tensor, y) -> Tensor:
    """Attach a CTC loss node to graph-produced log-posteriors.

    ``log_probs`` is (T, V) or (1, T, V) straight from log_softmax. The node's
    lattice gradient is injected into that parent; upstream ops turn it into
    the logits gradient.
    """
    shape = log_probs.data.shape
    if len(shape) == 3 and shape[0] == 1:
        T, V = shape[1], shape[2]
    elif len(shape) == 2:
        T, V = shape
    else:
        raise GraphError(f"ctc_node: expected (T, V) or (1, T, V) log-probs, got {shape}")
    y = _validate_labels(y, V)
    if T < min_frames(y):
        raise InfeasibleLength(
            f"{T} frames cannot align {len(y)} labels (need >= {min_frames(y)})")
    ext = extended_labels(y)
    cell = {}

    def _fn():
        lp = log_probs.data.reshape(T, V)
        log_z, alpha, beta = _lattice.forward_backward(lp, ext)
        if not np.isfinite(log_z):
            raise GraphError("ctc_node: target probability underflowed to zero")
        occ = np.exp(alpha + beta - log_z)
        grad_lp = np.zeros((T, V))
        for s, k in enumerate(ext):
            grad_lp[:, k] -= occ[:, s]
        cell["grad_lp"] = grad_lp
        return np.asarray(-log_z)

    out = Tensor(_fn(), _parents=(log_probs,), _op="ctc", _recompute=_fn, _validate=False)

    def _bw():
        log_probs.grad += float(out.grad) * cell["grad_lp"].reshape(shape)

    out._backward = _bw
    return out


# -- decoding ------------------------------------------------------------

def greedy_decode(post) -> list[int]:
    """Best-path decode: per-frame argmax, collapse repeats, drop blanks."""
    post = _validate_posteriors(post)
    picks = np.argmax(post, axis=1)
    out = []
    prev = -1
    for v in picks:
        if v != prev and v != BLANK:
            out.append(int(v))
        prev = v
    return out


def beam_decode(post, lm=None, beam: int = 8, lm_weight: float = 0.5,
                symbols=None) -> list[int]:
    labels, _ = beam_decode_scored(post, lm=lm, beam=beam, lm_weight=lm_weight,
                                   symbols=symbols)
    return labels


def beam_decode_scored(post, lm=None, beam: int = 8, lm_weight: float = 0.5,
                       symbols=None) -> tuple[list[int], float]:
    """Prefix beam search over collapsed label strings.

    Hypotheses carry separate blank/non-blank ending masses. With an ``lm``,
    shallow fusion adds lm_weight * log p_lm(sym | prefix) whenever a prefix
    is extended; ``symbols`` maps vocab indices to the LM's token strings.
    Returns (labels, combined log score of the winner).
    """
    post = _validate_posteriors(post)
    if beam < 1:
        raise ValueError(f"beam width must be >= 1, got {beam}")
    if lm is not None and symbols is None:
        raise ValueError("LM fusion needs the index -> symbol table")
    T, V = post.shape
    with np.errstate(divide="ignore"):
        lp = np.log(np.maximum(post, 1e-300))

    def fusion(prefix: tuple, v: int) -> float:
        if lm is None:
            return 0.0
        ctx = [symbols[i] for i in prefix]
        return lm_weight * lm.fusion_logp(symbols[v], ctx)

    NEG = -math.inf
    beams: dict[tuple, list[float]] = {(): [0.0, NEG]}  # prefix -> [ends-blank, ends-label]
    for t in range(T):
        nxt: dict[tuple, list[float]] = {}

        def bump(prefix, slot, val):
            entry = nxt.setdefault(prefix, [NEG, NEG])
            entry[slot] = np.logaddexp(entry[slot], val)

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            bump(prefix, 0, total + lp[t, BLANK])
            if prefix:
                bump(prefix, 1, pnb + lp[t, prefix[-1]])
            for v in range(1, V):
                base = pb if (prefix and v == prefix[-1]) else total
                if base == NEG:
                    continue
                bump(prefix + (v,), 1, base + lp[t, v] + fusion(prefix, v))
        ranked = sorted(nxt.items(), key=lambda kv: -np.logaddexp(kv[1][0], kv[1][1]))
        beams = dict(ranked[:beam])

    best, (pb, pnb) = max(beams.items(), key=lambda kv: np.logaddexp(kv[1][0], kv[1][1]))
    return list(best), float(np.logaddexp(pb, pnb))


# -- n-gram language model ------------------------------------------------

class NGramLM:
    """Add-k smoothed n-gram model over string tokens.

    Contexts shorter than n-1 are left-padded with the sentence-start marker.
    Conditionals are (count + k) / (total + k * |vocab|), which sums to 1
    over the vocabulary exactly.
    """

    def __init__(self, order: int, smoothing: float, vocab, counts=None):
        if order < 1:
            raise ValueError(f"order must be >= 1, got {order}")
        if smoothing <= 0:
            raise ValueError(f"smoothing must be > 0, got {smoothing}")
        vocab = list(vocab)
        if not vocab or len(set(vocab)) != len(vocab):
            raise ValueError("vocab must be non-empty and unique")
        if BOS in vocab:
            raise ValueError(f"{BOS!r} is reserved for context padding")
        self.order = order
        self.smoothing = float(smoothing)
        self.vocab = vocab
        self._vocab_set = set(vocab)
        # context tuple -> {token: count}
        self.counts: dict[tuple, dict[str, int]] = counts or {}
        self._totals = {ctx: sum(d.values()) for ctx, d in self.counts.items()}

    def _context(self, history) -> tuple:
        need = self.order - 1
        ctx = tuple(history)[-need:] if need else ()
        return (BOS,) * (need - len(ctx)) + ctx

    def observe(self, tokens) -> None:
        tokens = list(tokens)
        for i, tok in enumerate(tokens):
            ctx = self._context(tokens[:i])
            row = self.counts.setdefault(ctx, {})
            row[tok] = row.get(tok, 0) + 1
            self._totals[ctx] = self._totals.get(ctx, 0) + 1

    def logp(self, token: str, history) -> float:
        if token not in self._vocab_set:
            raise ValueError(f"token {token!r} not in LM vocabulary")
        ctx = self._context(history)
        c = self.counts.get(ctx, {}).get(token, 0)
        tot = self._totals.get(ctx, 0)
        return math.log((c + self.smoothing) / (tot + self.smoothing * len(self.vocab)))

    def fusion_logp(self, token: str, history) -> float:
        """logp, except tokens outside the vocabulary get the add-k floor.

        Decoders explore the acoustic vocabulary, which may be wider than the
        LM's; an unknown token scores like an unseen in-vocabulary one instead
        of failing the hypothesis outright.
        """
        if token in self._vocab_set:
            return self.logp(token, history)
        ctx = self._context(history)
        tot = self._totals.get(ctx, 0)
        return math.log(self.smoothing / (tot + self.smoothing * len(self.vocab)))

    def cond_dist(self, history) -> dict[str, float]:
        return {tok: math.exp(self.logp(tok, history)) for tok in self.vocab}

    def seq_logp(self, tokens) -> float:
        tokens = list(tokens)
        return sum(self.logp(tok, tokens[:i]) for i, tok in enumerate(tokens))

    def save(self, path) -> None:
        payload = {
            "order": self.order,
            "smoothing": self.smoothing,
            "vocab": self.vocab,
            "counts": {json.dumps(list(ctx)): dict(sorted(row.items()))
                       for ctx, row in sorted(self.counts.items())},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "NGramLM":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        counts = {tuple(json.loads(k)): {t: int(c) for t, c in row.items()}
                  for k, row in payload["counts"].items()}
        return cls(int(payload["order"]), float(payload["smoothing"]),
                   payload["vocab"], counts=counts)


def train_ngram_lm(transcripts, n: int = 3, smoothing: float = 0.1,
                   vocab=None) -> NGramLM:
    """Count-based LM from token sequences (strings count as char sequences)."""
    transcripts = [list(t) for t in transcripts]
    if not transcripts or all(not t for t in transcripts):
        raise ValueError("cannot train an LM on an empty corpus")
    if vocab is None:
        vocab = sorted({tok for t in transcripts for tok in t})
    lm = NGramLM(n, smoothing, vocab)
    for t in transcripts:
        for tok in t:
            if tok not in lm._vocab_set:
                raise ValueError(f"transcript token {tok!r} missing from vocab")
        lm.observe(t)
    return lm
