# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled CTC lattice kernel. Mirrors lwfs.lattice_np exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()


cdef inline double lse2(double a, double b) nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log(1.0 + exp(b - a))
    return b + log(1.0 + exp(a - b))


def forward_backward(double[:, ::1] logprobs, int[::1] ext):
    """Run the CTC forward-backward recursion over the label lattice.

    logprobs: (T, V) frame log-posteriors; ext: int32 extended labels.
    Returns (logZ, alpha, beta), alpha/beta of shape (T, S).
    """
    cdef Py_ssize_t T = logprobs.shape[0]
    cdef Py_ssize_t S = ext.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] alpha_arr = np.full((T, S), -np.inf)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] beta_arr = np.full((T, S), -np.inf)
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr
    cdef Py_ssize_t t, s
    cdef double acc, log_z

    alpha[0, 0] = logprobs[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logprobs[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = lse2(acc, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2]:
                acc = lse2(acc, alpha[t - 1, s - 2])
            alpha[t, s] = acc + logprobs[t, ext[s]]

    log_z = alpha[T - 1, S - 1]
    if S > 1:
        log_z = lse2(log_z, alpha[T - 1, S - 2])

    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            acc = beta[t + 1, s] + logprobs[t + 1, ext[s]]
            if s + 1 < S:
                acc = lse2(acc, beta[t + 1, s + 1] + logprobs[t + 1, ext[s + 1]])
            if s + 2 < S and ext[s + 2] != 0 and ext[s + 2] != ext[s]:
                acc = lse2(acc, beta[t + 1, s + 2] + logprobs[t + 1, ext[s + 2]])
            beta[t, s] = acc

    return float(log_z), alpha_arr, beta_arr
