import os
import subprocess
import sys

import numpy as np
import pytest

from lwfs import lattice, lattice_np
from lwfs.ctc import extended_labels


def _random_instance(rng, t_max=24, v_max=8, l_max=6):
    T = int(rng.integers(2, t_max + 1))
    V = int(rng.integers(2, v_max + 1))
    L = int(rng.integers(0, min(l_max, max(1, T // 2)) + 1))
    y = rng.integers(1, V, size=L).astype(np.int64)
    ext = extended_labels(y.tolist())
    if 2 * L + 1 > T:
        return None
    logits = rng.normal(size=(T, V))
    logprobs = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    return logprobs, ext


def test_backend_constant_matches_module():
    assert lattice.BACKEND in lattice.backends()


def test_single_blank_path():
    # empty label: the only path is all blanks
    logprobs = np.log(np.full((3, 2), 0.5))
    log_z, alpha, beta = lattice.forward_backward(logprobs, extended_labels([]))
    assert abs(log_z - 3 * np.log(0.5)) < 1e-12
    assert alpha.shape == (3, 1) and beta.shape == (3, 1)


def test_alpha_beta_frame_identity():
    rng = np.random.default_rng(5)
    for _ in range(50):
        inst = _random_instance(rng)
        if inst is None:
            continue
        logprobs, ext = inst
        log_z, alpha, beta = lattice.forward_backward(logprobs, ext)
        # beta excludes the frame emission, so alpha + beta totals logZ at every t
        totals = np.array([np.logaddexp.reduce(alpha[t] + beta[t])
                           for t in range(logprobs.shape[0])])
        assert np.allclose(totals, log_z, atol=1e-10)


def test_occupancy_rows_normalize():
    rng = np.random.default_rng(6)
    for _ in range(20):
        inst = _random_instance(rng)
        if inst is None:
            continue
        logprobs, ext = inst
        log_z, alpha, beta = lattice.forward_backward(logprobs, ext)
        gamma = np.exp(alpha + beta - log_z)
        assert np.allclose(gamma.sum(axis=1), 1.0, atol=1e-10)


@pytest.mark.skipif("compiled" not in lattice.backends(),
                    reason="compiled backend not built")
def test_backends_agree():
    compiled = lattice.backends()["compiled"]
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(200):
        inst = _random_instance(rng)
        if inst is None:
            continue
        logprobs, ext = inst
        z_np, a_np, b_np = lattice_np.forward_backward(logprobs, ext)
        z_c, a_c, b_c = compiled.forward_backward(
            np.ascontiguousarray(logprobs), np.ascontiguousarray(ext, dtype=np.int32))
        assert abs(z_np - z_c) < 1e-12
        assert np.allclose(a_np, a_c, atol=1e-12)
        assert np.allclose(b_np, b_c, atol=1e-12)
        checked += 1
    assert checked > 100


def test_dispatcher_coerces_dtypes():
    rng = np.random.default_rng(8)
    logprobs, ext = _random_instance(rng, t_max=10)
    z64, _, _ = lattice.forward_backward(logprobs, ext)
    z_list, _, _ = lattice.forward_backward(logprobs.tolist(), ext.tolist())
    assert z64 == z_list
    # non-contiguous view
    wide = np.repeat(logprobs, 2, axis=1)[:, ::2]
    z_view, _, _ = lattice.forward_backward(wide, ext)
    assert z64 == z_view


def test_pure_env_forces_numpy_backend():
    env = dict(os.environ, LWFS_PURE="1")
    out = subprocess.run(
        [sys.executable, "-c", "from lwfs import lattice; print(lattice.BACKEND)"],
        capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "numpy"
