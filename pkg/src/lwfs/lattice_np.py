"""Pure-numpy CTC lattice kernels (fallback for the compiled extension).

Conventions shared with ``lwfs._lattice``: the extended label sequence is the
blank-interleaved target (blank id 0 at even positions, length 2L+1). alpha
includes the emission at frame t; beta covers completion strictly after frame
t, so ``alpha[t] + beta[t]`` log-sums to the total log-likelihood at every t.
"""

from __future__ import annotations

import numpy as np

NEG_INF = -np.inf


def _shift_down(row: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(row, NEG_INF)
    out[k:] = row[:-k] if k else row
    return out


def _shift_up(row: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(row, NEG_INF)
    out[:len(row) - k] = row[k:] if k else row
    return out


def forward_backward(logprobs: np.ndarray, ext: np.ndarray):
    """Run the CTC forward-backward recursion over the label lattice.

    logprobs: (T, V) frame log-posteriors; ext: int32 extended labels.
    Returns (logZ, alpha, beta), alpha/beta of shape (T, S).
    """
    T = logprobs.shape[0]
    S = ext.shape[0]
    em = logprobs[:, ext]  # (T, S)

    # skip transition into s allowed iff ext[s] is a label differing from ext[s-2]
    skip_in = np.zeros(S, dtype=bool)
    if S > 2:
        skip_in[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = em[0, 0]
    if S > 1:
        alpha[0, 1] = em[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = _shift_down(prev, 1)
        skip = np.where(skip_in, _shift_down(prev, 2), NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), skip) + em[t]

    if S > 1:
        log_z = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    else:
        log_z = alpha[T - 1, S - 1]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    skip_out = np.zeros(S, dtype=bool)
    if S > 2:
        skip_out[:-2] = skip_in[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + em[t + 1]
        stay = nxt
        step = _shift_up(nxt, 1)
        skip = np.where(skip_out, _shift_up(nxt, 2), NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(stay, step), skip)

    return float(log_z), alpha, beta
