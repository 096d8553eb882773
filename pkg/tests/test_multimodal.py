import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monovl import multimodal as mm
from monovl import numerics as nx
from monovl.exceptions import ConfigError, InputError


def grid_oracle(height, width, budget, thumb=4):
    """Brute-force restatement of the resize rule over every candidate grid."""
    cap = min(budget - thumb, 10_240, 8_000_000 // 784)
    h0 = max(1, int(math.floor(height / 28 + 0.5)))
    w0 = max(1, int(math.floor(width / 28 + 0.5)))
    if h0 * w0 <= cap:
        return h0, w0
    a = width / height
    best = None
    for h in range(1, h0 + 1):
        for w in range(1, w0 + 1):
            if h * w > cap:
                continue
            near_w = w in (math.floor(h * a), math.ceil(h * a))
            near_h = h in (math.floor(w / a), math.ceil(w / a))
            if not (near_w or near_h):
                continue
            key = (h * w, -abs(w / h - a), h, w)
            if best is None or key > best:
                best = key
    return best[2], best[3]


def test_exact_fit_56():
    patches, grid = mm.patchify(np.zeros((56, 56, 3)), 8)
    assert (grid.rows, grid.cols) == (2, 2)
    assert patches.shape == (8, 28 * 28 * 3)


def test_minimum_image_28():
    patches, grid = mm.patchify(np.zeros((28, 28, 3)), 8)
    assert grid.n_content == 1 and grid.n_thumbnail == 4
    assert patches.shape[0] == 5


def test_300x500_budget_1280():
    patches, grid = mm.patchify(np.random.default_rng(0).random((300, 500, 3)), 1280)
    # 300/28 = 10.7 -> 11 rows, 500/28 = 17.9 -> 18 columns; 198 + 4 fits
    assert (grid.rows, grid.cols) == grid_oracle(300, 500, 1280) == (11, 18)
    assert patches.shape[0] == 202


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 4000), st.integers(1, 4000),
       st.sampled_from([8, 64, 1280, 1792, 3328, 6400, 20000]))
def test_choose_grid_matches_oracle(h, w, budget):
    assert mm.choose_grid(h, w, budget) == grid_oracle(h, w, budget)


def test_patch_content_is_row_major():
    img = np.zeros((56, 84, 3))
    img[28:, 56:] = 1.0  # bottom-right cell
    patches, grid = mm.patchify(img, 100)
    assert (grid.rows, grid.cols) == (2, 3)
    assert patches[5].min() == 1.0 and patches[:5].max() == 0.0


def test_degenerate_image_rejected():
    with pytest.raises(InputError):
        mm.patchify(np.zeros((0, 5, 3)), 64)
    with pytest.raises(InputError):
        mm.choose_grid(0, 10, 64)


def test_pixel_ceiling_rejected():
    with pytest.raises(InputError):
        mm.check_image(np.zeros((3000, 3000, 3), dtype=np.float32))


def test_zero_image_zero_embeddings():
    d, dp = 6, 5
    z = lambda *s: nx.Parameter(np.zeros(s))
    rng = np.random.default_rng(0)
    emb = mm.VisualEmbedder(nx.Parameter(rng.standard_normal((2352, dp))), z(dp), z(16, dp),
                            (4, 4), nx.Parameter(rng.standard_normal((dp, d))), z(d),
                            nx.Parameter(rng.standard_normal((d, d))), z(d))
    patches, grid = mm.patchify(np.zeros((56, 56, 3)), 8)
    assert np.array_equal(mm.embed_patches(patches, grid, emb).data, np.zeros((8, d)))


def test_grid_larger_than_pe_table():
    with pytest.raises(ConfigError):
        mm.interpolate_pe(np.zeros((16, 3)), (4, 4), (5, 2))


def test_interpolate_pe_matches_image_resize():
    rng = np.random.default_rng(2)
    pe = rng.standard_normal((6 * 7, 3))
    out = mm.interpolate_pe(pe, (6, 7), (4, 3)).data
    want = mm.resize_bilinear(pe.reshape(6, 7, 3), 4, 3).reshape(12, 3)
    np.testing.assert_allclose(out, want, rtol=1e-12, atol=1e-14)


def test_interpolate_pe_identity_grid():
    pe = np.arange(12.0).reshape(4, 3)
    assert np.array_equal(mm.interpolate_pe(pe, (2, 2), (2, 2)).data, pe)


def test_interpolate_pe_gradient():
    pe = nx.Parameter(np.random.default_rng(0).standard_normal((12, 2)), name="pe")
    w = np.random.default_rng(1).standard_normal((6, 2))
    rep = nx.grad_check(lambda: nx.total(nx.mul(mm.interpolate_pe(pe, (3, 4), (2, 3)), w)), [pe])
    assert rep.passed


def test_tokenize_examples():
    assert mm.tokenize("") == [mm.BOS, mm.EOS]
    assert mm.tokenize("ab") == [mm.BOS, 97, 98, mm.EOS]


@given(st.text(max_size=40))
def test_tokenize_round_trip(text):
    assert mm.detokenize(mm.tokenize(text)) == text


def test_assemble_counting():
    seq = mm.assemble(np.zeros((4, 2)), [1, 2, 3, 4, 5], (3, 5), add_eos=True)
    assert len(seq) == 4 + 3 + 2 + 4
    assert seq.loss_mask.sum() == 3
    assert seq.modality.sum() == 4
    assert list(seq.token_ids[:2]) == [mm.BOS, mm.IMG_START]
    assert seq.token_ids[6] == mm.IMG_END and seq.token_ids[-1] == mm.EOS
    # response bytes and EOS carry the loss
    assert list(np.flatnonzero(seq.loss_mask)) == [10, 11, 12]
    seq.validate()


def test_assemble_text_only():
    seq = mm.assemble(None, [7, 8, 9], (1, 3))
    assert not seq.modality.any()
    assert seq.token_ids[0] == mm.BOS


@pytest.mark.parametrize("span", [(2, 1), (0, 2), (-1, 3), (1, 4)])
def test_assemble_bad_span(span):
    with pytest.raises(InputError):
        mm.assemble(None, [1, 2, 3], span)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 20), st.integers(0, 10), st.integers(0, 10), st.booleans())
def test_assemble_layout_properties(n_vis, n_prompt, n_resp, eos):
    ids = list(range(n_prompt + n_resp))
    seq = mm.assemble(None, ids, (n_prompt, n_prompt + n_resp), add_eos=eos, n_visual=n_vis)
    specials = (3 if n_vis else 1) + int(eos)
    assert len(seq) == n_vis + n_prompt + n_resp + specials
    assert seq.loss_mask.sum() == n_resp + int(eos)
    assert not np.any(seq.loss_mask & seq.modality)
    assert np.array_equal(seq.positions, np.arange(len(seq)))
