import warnings

import numpy as np
import pytest

from antkv import (
    Codebook,
    VqConfig,
    bits_per_element,
    decode_token,
    encode_rows,
    encode_token,
    load_codebook,
    save_codebook,
    weighted_kmeans,
)
from antkv.kernels import assign_nearest


def unweighted_lloyd(X, m, init, max_iter=100, tol=1e-10):
    """Plain k-means sharing the package's arithmetic, for the
    uniform-weights equivalence oracle."""
    C = init.copy()
    trace = []
    prev_idx = None
    for _ in range(max_iter):
        idx, d2 = assign_nearest(X, C)
        trace.append(float((np.ones(len(X)) * d2).sum()))
        counts = np.bincount(idx, weights=np.ones(len(X)), minlength=m)
        csum = np.zeros((m, X.shape[1]))
        np.add.at(csum, idx, 1.0 * X)
        live = counts > 0
        C_new = C.copy()
        C_new[live] = csum[live] / counts[live, None]
        empties = np.flatnonzero(~live)
        if empties.size:
            wd2 = 1.0 * d2
            for e in empties:
                far = int(np.argmax(wd2))
                C_new[e] = X[far]
                wd2[far] = -1.0
        converged = prev_idx is not None and np.array_equal(idx, prev_idx)
        small = len(trace) >= 2 and trace[-2] - trace[-1] < tol
        C = C_new
        prev_idx = idx
        if converged or small:
            break
    return C, trace


def test_kmeans_m_equals_n_reaches_zero_objective(rng):
    X = rng.standard_normal((6, 3)) * 5
    res = weighted_kmeans(X, np.ones(6), 6, seed=0)
    assert res.objective_trace[-1] < 1e-20
    got = sorted(map(tuple, np.round(res.codebook.centroids, 5)))
    want = sorted(map(tuple, np.round(X.astype(np.float32), 5)))
    assert got == want


def test_kmeans_weighted_mean_single_cluster():
    res = weighted_kmeans(np.array([[0.0], [1.0]]), np.array([3.0, 1.0]),
                          1, seed=0)
    assert np.allclose(res.codebook.centroids, [[0.25]], atol=1e-7)


def test_kmeans_uniform_weights_match_unweighted_bitwise(rng):
    X = rng.standard_normal((80, 4))
    init = X[rng.choice(80, size=8, replace=False)].copy()
    res = weighted_kmeans(X, np.ones(80), 8, seed=0, init_centroids=init)
    C2, trace2 = unweighted_lloyd(X, 8, init)
    assert np.array_equal(res.codebook.centroids, C2.astype(np.float32))
    assert res.objective_trace == trace2


def test_kmeans_objective_non_increasing(rng):
    for seed in range(10):
        X = rng.standard_normal((60, 4))
        w = rng.random(60) + 0.01
        res = weighted_kmeans(X, w, 7, seed=seed)
        tr = res.objective_trace
        assert all(tr[i + 1] <= tr[i] for i in range(len(tr) - 1))


def test_kmeans_zero_weight_point_is_ignored(rng):
    X = rng.standard_normal((30, 3))
    w = np.ones(30)
    w[11] = 0.0
    res1 = weighted_kmeans(X, w, 4, seed=9)
    X2 = X.copy()
    X2[11] = 1e6  # moving a zero-weight point must not matter
    res2 = weighted_kmeans(X2, w, 4, seed=9)
    # the far point may still capture an assignment slot; exclude the
    # degenerate case by checking the weighted objective and centroids
    assert np.array_equal(res1.codebook.centroids, res2.codebook.centroids)


def test_kmeans_rejects_all_zero_weights(rng):
    with pytest.raises(ValueError):
        weighted_kmeans(rng.standard_normal((4, 2)), np.zeros(4), 2, seed=0)


def test_kmeans_m_greater_than_n_pads_with_flag(rng):
    X = rng.standard_normal((3, 2))
    res = weighted_kmeans(X, np.ones(3), 8, seed=0)
    assert res.padded_init
    assert res.codebook.centroids.shape == (8, 2)
    assert res.objective_trace[-1] < 1e-9


def make_codebook(rng, m=8, d_sub=4):
    C = rng.standard_normal((m, d_sub)).astype(np.float32)
    return Codebook(config=VqConfig(d_sub=d_sub, m=m), centroids=C)


def test_encode_centroid_concatenation_is_lossless(rng):
    cb = make_codebook(rng)
    row = np.concatenate([cb.centroids[3], cb.centroids[7]])
    codes = encode_token(row, cb)
    assert list(codes) == [3, 7]
    assert np.array_equal(decode_token(codes, cb), row)


def test_encode_tie_breaks_to_lower_index():
    C = np.zeros((6, 2), dtype=np.float32)
    C[2] = [0.0, 0.0]
    C[5] = [2.0, 0.0]
    C[0] = [10.0, 10.0]
    C[1] = [10.0, -10.0]
    C[3] = [-10.0, 10.0]
    C[4] = [-10.0, -10.0]
    cb = Codebook(config=VqConfig(d_sub=2, m=6), centroids=C)
    codes = encode_token(np.array([1.0, 0.0]), cb)
    assert codes[0] == 2


def test_encode_matches_exhaustive_search(rng):
    cb = make_codebook(rng, m=16, d_sub=4)
    row = rng.standard_normal(12)
    codes = encode_token(row, cb)
    for g in range(3):
        sub = row[4 * g:4 * (g + 1)]
        dists = ((cb.centroids.astype(np.float64) - sub) ** 2).sum(axis=1)
        assert codes[g] == np.argmin(dists)


def test_decode_encode_idempotent(rng):
    cb = make_codebook(rng)
    row = rng.standard_normal(8)
    codes = encode_token(row, cb)
    again = encode_token(decode_token(codes, cb).astype(np.float64), cb)
    assert np.array_equal(codes, again)


def test_encode_beats_random_assignments(rng):
    cb = make_codebook(rng, m=8, d_sub=4)
    row = rng.standard_normal(8)
    best = ((row - decode_token(encode_token(row, cb), cb)) ** 2).sum()
    for _ in range(100):
        codes = rng.integers(8, size=2)
        err = ((row - decode_token(codes, cb)) ** 2).sum()
        assert best <= err + 1e-12


def test_decode_rejects_out_of_range(rng):
    cb = make_codebook(rng)
    with pytest.raises(ValueError):
        decode_token(np.array([0, 8]), cb)


@pytest.mark.parametrize("notation,expected", [
    ("d2m256", 4.0),
    ("d4m256", 2.0),
    ("d8m256", 1.0),
    ("d16m4096", 0.75),
    ("d32m4096", 0.375),
])
def test_bits_per_element_table(notation, expected):
    assert float(bits_per_element(VqConfig.from_notation(notation))) == expected


def test_bits_index_size_consistency():
    assert bits_per_element(VqConfig(2, 256)) * 2 == 8
    assert bits_per_element(VqConfig(4, 256)) * 4 == 8


def test_bits_non_power_of_two_flagged():
    cfg = VqConfig(4, 100)
    assert cfg.is_padded
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert bits_per_element(cfg) == pytest.approx(7 / 4)
    assert caught


def test_codebook_roundtrip_bit_exact(rng, tmp_path):
    cb = make_codebook(rng, m=16, d_sub=4)
    cb.groups = 3
    save_codebook(cb, tmp_path / "cb.json")
    loaded = load_codebook(tmp_path / "cb.json")
    assert np.array_equal(loaded.centroids, cb.centroids)
    assert loaded.config == cb.config
    assert loaded.groups == 3
    X = rng.standard_normal((10, 12))
    assert np.array_equal(encode_rows(X, cb), encode_rows(X, loaded))
