import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import compose_oracle
from tficon.attention import (AttentionRecord, ComposeOptions, PatchIndexMap, attention_maps, build_index_map,
                              compose, in_window, index_map_from_box, inject_hook, record_hook)
from tficon.errors import ContractError, StepError
from tficon.prompts import build_exceptional
from tficon.solver import LatentState, SolverConfig, integrate


def sentinels(n, b):
    A_m = 1000.0 + np.arange(n * n).reshape(n, n)
    A_r = 2000.0 + np.arange(b * b).reshape(b, b)
    A_c = 3000.0 + np.arange(n * b).reshape(n, b)
    A_cr = 4000.0 + np.arange(b * n).reshape(b, n)
    return A_m, A_r, A_c, A_cr


def test_attention_maps_examples(rng):
    assert attention_maps(np.array([[1.0]]), np.array([[1.0]])).tolist() == [[1.0]]
    q = np.array([[1.0, 0.0]])
    k = np.array([[0.0, 1.0], [0.0, -2.0], [0.0, 5.0]])
    np.testing.assert_allclose(attention_maps(q, k), np.full((1, 3), 1 / 3), atol=1e-15)
    A = attention_maps(rng.standard_normal((3, 4)), rng.standard_normal((5, 4)))
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-9)


def test_attention_maps_scaling():
    q = np.array([[2.0, 0.0, 0.0, 0.0]])
    k = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
    # logit gap 2 / sqrt(4) = 1
    np.testing.assert_allclose(attention_maps(q, k)[0, 0], np.e / (np.e + 1), rtol=1e-14)


def test_attention_maps_d_mismatch():
    with pytest.raises(ContractError):
        attention_maps(np.zeros((2, 3)), np.zeros((2, 4)))


def test_window_rule():
    assert sum(in_window(t, 0.4, 20) for t in range(1, 21)) == 12
    assert all(in_window(t, 0.0, 20) for t in range(1, 21))
    assert not any(in_window(t, 1.0, 20) for t in range(1, 21))
    assert in_window(9, 0.4, 20) and not in_window(8, 0.4, 20)


def test_index_map_centre_block_4x4():
    idx = build_index_map(np.pad(np.ones((2, 2)), 1), (4, 4))
    assert idx.blue.tolist() == [5, 6, 9, 10]
    assert idx.ref_grid == (2, 2)


def test_index_map_full_and_corner():
    full = build_index_map(np.ones((4, 4)), (4, 4))
    assert full.blue.tolist() == list(range(16)) and full.white.size == 0
    corner = index_map_from_box((0, 0, 1, 1), (2, 2))
    assert corner.blue.tolist() == [0] and corner.white.tolist() == [1, 2, 3]


def test_index_map_empty_is_skipped():
    assert build_index_map(np.zeros((4, 4)), (2, 2)) is None


def test_index_map_outward_rounding():
    m = np.zeros((16, 16))
    m[5, 9] = 1
    idx = build_index_map(m, (2, 2))
    assert idx.box == (0, 1, 1, 1)
    m2 = np.zeros((16, 16))
    m2[7:9, 7:9] = 1
    assert build_index_map(m2, (8, 8)).box == (3, 3, 2, 2)
    assert build_index_map(m2, (2, 2)).box == (0, 0, 2, 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.data())
def test_index_map_same_resolution_reproduces_box(h, w, data):
    top = data.draw(st.integers(0, h - 1))
    left = data.draw(st.integers(0, w - 1))
    bh = data.draw(st.integers(1, h - top))
    bw = data.draw(st.integers(1, w - left))
    m = np.zeros((h, w))
    m[top:top + bh, left:left + bw] = 1
    idx = build_index_map(m, (h, w))
    assert idx.box == (top, left, bh, bw)
    assert idx.blue.size == bh * bw
    assert len(set(idx.blue.tolist()) | set(idx.white.tolist())) == h * w


def test_compose_centre_block_oracle():
    idx = index_map_from_box((1, 1, 2, 2), (4, 4))
    A_m, A_r, A_c, _ = sentinels(16, 4)
    assert np.array_equal(compose(A_m, A_r, A_c, idx), compose_oracle(A_m, A_r, A_c, (4, 4), (1, 1, 2, 2)))


def test_compose_centre_block_regions():
    idx = index_map_from_box((1, 1, 2, 2), (4, 4))
    A_m, A_r, A_c, _ = sentinels(16, 4)
    out = compose(A_m, A_r, A_c, idx)
    blue, white = idx.blue, idx.white
    assert np.array_equal(out[np.ix_(blue, blue)], A_r)
    assert np.array_equal(out[np.ix_(white, white)], A_m[np.ix_(white, white)])
    # rows of A_cross at blue main positions are never read
    A_c2 = A_c.copy()
    A_c2[blue] = -1.0
    assert np.array_equal(compose(A_m, A_r, A_c2, idx), out)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data(), st.booleans())
def test_compose_partition_oracle(h, w, data, reverse):
    top = data.draw(st.integers(0, h - 1))
    left = data.draw(st.integers(0, w - 1))
    bh = data.draw(st.integers(1, h - top))
    bw = data.draw(st.integers(1, w - left))
    idx = index_map_from_box((top, left, bh, bw), (h, w))
    A_m, A_r, A_c, A_cr = sentinels(h * w, bh * bw)
    got = compose(A_m, A_r, A_c, idx, ComposeOptions(reverse_cross=reverse), A_cr if reverse else None)
    want = compose_oracle(A_m, A_r, A_c, (h, w), (top, left, bh, bw), A_cr if reverse else None)
    assert np.array_equal(got, want)


def test_compose_degenerate_cases(rng):
    A_m = rng.uniform(size=(9, 9))
    A_r = rng.uniform(size=(9, 9))
    full = index_map_from_box((0, 0, 3, 3), (3, 3))
    assert np.array_equal(compose(A_m, A_r, rng.uniform(size=(9, 9)), full), A_r)
    empty = PatchIndexMap((3, 3), (0, 0, 0, 0), np.array([], dtype=int), np.arange(9))
    assert np.array_equal(compose(A_m, None, None, empty), A_m)


def test_compose_renormalize(rng):
    idx = index_map_from_box((1, 0, 2, 2), (3, 3))
    A_m = attention_maps(rng.standard_normal((9, 4)), rng.standard_normal((9, 4)))
    A_r = attention_maps(rng.standard_normal((4, 4)), rng.standard_normal((4, 4)))
    A_c = attention_maps(rng.standard_normal((9, 4)), rng.standard_normal((4, 4)))
    raw = compose(A_m, A_r, A_c, idx)
    assert np.max(np.abs(raw.sum(axis=1) - 1)) > 1e-3
    norm = compose(A_m, A_r, A_c, idx, ComposeOptions(renormalize_rows=True))
    np.testing.assert_allclose(norm.sum(axis=1), 1.0, atol=1e-6)


def test_compose_contract_errors():
    idx = index_map_from_box((0, 0, 1, 1), (2, 2))
    with pytest.raises(ContractError):
        compose(np.zeros((3, 3)), np.zeros((1, 1)), np.zeros((4, 1)), idx)
    with pytest.raises(ContractError):
        compose(np.zeros((4, 4)), np.zeros((2, 2)), np.zeros((4, 1)), idx)
    bad = PatchIndexMap((2, 2), (0, 0, 1, 1), np.array([0, 0]), np.array([1, 2, 3]))
    with pytest.raises(ContractError):
        compose(np.zeros((4, 4)), np.zeros((2, 2)), np.zeros((4, 2)), bad)
    with pytest.raises(ContractError):
        compose(np.zeros((4, 4)), np.zeros((1, 1)), np.zeros((4, 1)), idx, ComposeOptions(reverse_cross=True))


def _run_record(backbone, images, tau_a, sides=("main", "reference")):
    den = backbone.denoiser
    W = build_exceptional(backbone.text_encoder)
    mask = np.zeros((16, 16))
    mask[4:12, 2:10] = 1
    maps = {l: build_index_map(mask, g) for l, g in den.layer_grids.items()}
    rec = AttentionRecord(maps, tau_a, 20)
    x = LatentState(np.random.default_rng(0).standard_normal(den.latent_shape), 20)
    finals = []
    for side, img in zip(sides, images):
        final, _ = integrate(x, den, W, SolverConfig(), schedule=backbone.schedule, hooks=[record_hook(side, rec)])
        finals.append(final.data)
    return rec, finals, x, W


def test_record_window(backbone, images):
    rec, _, _, _ = _run_record(backbone, images, 0.4)
    assert rec.steps() == list(range(9, 21))
    assert len(rec) == 12 * 3
    for key in rec.keys():
        e = rec.get(*key)
        assert e.complete
        for A in (e.main, e.ref, e.cross):
            np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-6)
    assert len(_run_record(backbone, images, 1.0)[0]) == 0
    assert _run_record(backbone, images, 0.0)[0].steps() == list(range(1, 21))


def test_record_hook_is_neutral(backbone, images):
    _, finals, x, W = _run_record(backbone, images, 0.0, sides=("main",))
    plain, _ = integrate(x, backbone.denoiser, W, SolverConfig(), schedule=backbone.schedule)
    assert np.array_equal(finals[0], plain.data)


def test_record_collision(backbone, images):
    rec, _, x, W = _run_record(backbone, images, 0.4)
    with pytest.raises(StepError) as info:
        integrate(x, backbone.denoiser, W, SolverConfig(), schedule=backbone.schedule,
                  hooks=[record_hook("main", rec)])
    assert isinstance(info.value.cause, ContractError)


def test_inject_provider_window(backbone, images):
    rec, _, _, _ = _run_record(backbone, images, 0.4)
    provider = inject_hook(rec)
    assert provider(8) is None
    ov = provider(9)
    assert set(ov.maps) == {0, 1, 2}
    assert ov.maps[0].shape == (256, 256) and ov.maps[1].shape == (64, 64)


def test_inject_missing_record_names_step(backbone, images):
    rec, _, _, _ = _run_record(backbone, images, 0.4)
    provider = inject_hook(rec, tau_a=0.0)
    with pytest.raises(ContractError, match="step 8"):
        provider(8)
