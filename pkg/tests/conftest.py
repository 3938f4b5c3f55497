import os

# Tiny matrices everywhere; BLAS threading only adds jitter.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from sphred.model import ModelConfig, init_params
from sphred.rng import derive_rng


def micro_config(scenario=2, vocab=20, shared=False):
    return ModelConfig(vocab_size=vocab, embed_dim=6, encoder_dim=8, status_dim=4,
                       latent_dim=4, label_embed_dim=8, decoder_dim=8,
                       scenario=scenario, shared_status=shared)


def micro_params(cfg, seed=0):
    return init_params(cfg, derive_rng(seed, "init"))


def rel_err(analytic, numeric, floor=1e-4):
    """Floored relative error; the floor absorbs finite-difference noise on
    near-zero coordinates (same convention as the standard gradcheckers)."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff(f, arrays, eps=1e-5):
    """Central-difference gradients of scalar f w.r.t. a dict of arrays."""
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + eps
            fp = f()
            arr[idx] = old - eps
            fm = f()
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * eps)
        grads[name] = g
    return grads


def max_grad_rel_err(analytic: dict, numeric: dict, floor=1e-4):
    worst = 0.0
    where = None
    for name in numeric:
        a, n = analytic[name], numeric[name]
        it = np.nditer(n, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            r = rel_err(float(a[idx]), float(n[idx]), floor)
            if r > worst:
                worst, where = r, (name, idx)
    return worst, where


@pytest.fixture
def rng():
    return derive_rng(1234, "tests")
