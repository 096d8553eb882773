import os

# size the kernel thread pool before numba is imported anywhere
os.environ.setdefault("NUMBA_NUM_THREADS", "4")

import numpy as np
import pytest

from monovl import model as M
from monovl import synthetic as S


def tiny_config(**kw):
    base = dict(d_model=8, n_heads=2, n_layers=2, ffn_hidden=16, vocab_size=261, max_context=96,
                pe_grid=(4, 4), patch_dim=8, init_std=0.3)
    base.update(kw)
    return M.ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return M.ModelState(tiny_config(), seed=1)


@pytest.fixture
def sample():
    return S.gen_sample(0, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
