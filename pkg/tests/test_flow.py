import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlflow import _kernels_py
from vlflow.flow import (attention_flow, average_reports, imf, imf_profiles,
                         residual_attention)
from vlflow.records import AttentionRecord, ModalityPartition


def random_stochastic(rng, n):
    w = rng.random((n, n)) ** 3
    return w / w.sum(axis=1, keepdims=True)


def brute_imf(flow, vision, language):
    """Double loop over every (x, y) pair, independent of the library path."""
    inter = intra = 0.0
    V, L = set(vision), set(language)
    n = flow.shape[0]
    for x in range(n):
        for y in range(n):
            if (x in V and y in L) or (x in L and y in V):
                inter += flow[x, y]
            elif (x in V and y in V) or (x in L and y in L):
                intra += flow[x, y]
    return inter / (inter + intra)


def brute_flow(layers, i, j):
    out = np.eye(layers[0].shape[0])
    for a in range(i, j + 1):
        out = layers[a - 1] @ out
    return out


def random_partition(rng, n):
    perm = rng.permutation(n)
    nv = int(rng.integers(1, n))
    return ModalityPartition(tuple(int(i) for i in perm[:nv]), tuple(int(i) for i in perm[nv:]))


class TestResidualAttention:
    def test_identity(self):
        np.testing.assert_array_equal(residual_attention(np.eye(3)), np.eye(3))

    def test_swap(self):
        out = residual_attention(np.array([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_array_equal(out, np.full((2, 2), 0.5))

    def test_uniform(self):
        out = residual_attention(np.full((3, 3), 1 / 3))
        np.testing.assert_allclose(np.diag(out), 2 / 3, rtol=0, atol=1e-15)
        np.testing.assert_allclose(out[~np.eye(3, dtype=bool)], 1 / 6, rtol=0, atol=1e-15)

    def test_accepts_records(self):
        rec = AttentionRecord(1, np.eye(2))
        np.testing.assert_array_equal(residual_attention(rec), np.eye(2))

    def test_non_square(self):
        with pytest.raises(ValueError):
            residual_attention(np.ones((2, 3)))


class TestAttentionFlow:
    def test_single_layer_unchanged(self):
        a = np.array([[0.75, 0.25], [0.25, 0.75]])
        np.testing.assert_array_equal(attention_flow([a, np.eye(2)], 1, 1).matrix, a)

    def test_two_identical_layers(self):
        a = np.array([[0.75, 0.25], [0.25, 0.75]])
        out = attention_flow([a, a], 1, 2).matrix
        np.testing.assert_allclose(out, [[0.625, 0.375], [0.375, 0.625]], rtol=0, atol=1e-15)

    def test_identity_layers(self):
        np.testing.assert_array_equal(attention_flow([np.eye(4)] * 3, 1, 3).matrix, np.eye(4))

    def test_later_layers_on_left(self):
        rng = np.random.default_rng(3)
        layers = [random_stochastic(rng, 4) for _ in range(3)]
        np.testing.assert_allclose(attention_flow(layers, 1, 3).matrix,
                                   layers[2] @ layers[1] @ layers[0], rtol=0, atol=1e-14)

    def test_bad_range(self):
        with pytest.raises(ValueError):
            attention_flow([np.eye(2)] * 3, 3, 2)
        with pytest.raises(ValueError):
            attention_flow([np.eye(2)] * 3, 0, 2)


class TestImf:
    def test_identity_flow_is_zero(self):
        assert imf(np.eye(5), ModalityPartition((0, 1), (2, 3, 4))) == 0.0

    def test_uniform_single_layer(self):
        # enumeration: A = 0.5 I + 0.5/4, |V| = |L| = 2
        a = residual_attention(np.full((4, 4), 0.25))
        part = ModalityPartition((0, 1), (2, 3))
        assert brute_imf(a, part.vision, part.language) == pytest.approx(0.25, abs=1e-15)
        assert abs(imf(a, part) - 0.25) <= 1e-12

    def test_two_token_swap(self):
        a = residual_attention(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert imf(a, ModalityPartition((0,), (1,))) == pytest.approx(0.5, abs=1e-15)

    def test_special_tokens_excluded_by_default(self):
        rng = np.random.default_rng(1)
        a = random_stochastic(rng, 6)
        part = ModalityPartition.joint(2, 2)
        assert imf(a, part) == pytest.approx(brute_imf(a, part.vision, part.language), abs=1e-14)
        with_special = imf(a, part, include_special=True)
        lang = part.language + part.special
        assert with_special == pytest.approx(brute_imf(a, part.vision, lang), abs=1e-14)

    def test_empty_side(self):
        with pytest.raises(ValueError):
            imf(np.eye(3), ModalityPartition((0, 1, 2), ()))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            imf(np.eye(3), ModalityPartition((0,), (5,)))

    @pytest.mark.parametrize("n", range(2, 9))
    def test_matches_brute_force(self, n):
        rng = np.random.default_rng(n)
        for _ in range(20):
            J = int(rng.integers(1, 5))
            layers = [residual_attention(random_stochastic(rng, n)) for _ in range(J)]
            part = random_partition(rng, n)
            i = int(rng.integers(1, J + 1))
            j = int(rng.integers(i, J + 1))
            flow = attention_flow(layers, i, j)
            expected = brute_imf(brute_flow(layers, i, j), part.vision, part.language)
            assert abs(imf(flow, part) - expected) <= 1e-12

    def test_kernels_agree(self):
        rng = np.random.default_rng(5)
        from vlflow._backend import kernels
        for _ in range(50):
            a = random_stochastic(rng, 7)
            part = random_partition(rng, 7)
            got = kernels.imf_sums(a, part.vision, part.language)
            ref = _kernels_py.imf_sums(a, part.vision, part.language)
            np.testing.assert_allclose(got, ref, rtol=0, atol=1e-13)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 8), st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_permutation_invariance(self, n, J, seed):
        rng = np.random.default_rng(seed)
        layers = [random_stochastic(rng, n) for _ in range(J)]
        part = random_partition(rng, n)
        perm = rng.permutation(n)
        inv = np.argsort(perm)
        p_layers = [w[np.ix_(perm, perm)] for w in layers]
        p_part = ModalityPartition(tuple(int(inv[v]) for v in part.vision),
                                   tuple(int(inv[l]) for l in part.language))
        a = imf_profiles(layers, part)
        b = imf_profiles(p_layers, p_part)
        for key in a.values:
            assert a.values[key] == pytest.approx(b.values[key], abs=1e-12)
            assert 0.0 <= a.values[key] <= 1.0


class TestProfiles:
    def test_single_layer(self):
        rng = np.random.default_rng(0)
        rep = imf_profiles([random_stochastic(rng, 4)], ModalityPartition((0, 1), (2, 3)))
        assert len(rep.from_input) == len(rep.within_layer) == 1
        assert rep.from_input == rep.within_layer

    def test_identity_layers_zero(self):
        rep = imf_profiles([np.eye(5)] * 4, ModalityPartition((0, 1), (2, 3, 4)))
        assert rep.from_input == [0.0] * 4 and rep.within_layer == [0.0] * 4

    def test_profiles_match_pairwise_flow(self):
        rng = np.random.default_rng(2)
        ws = [random_stochastic(rng, 6) for _ in range(4)]
        part = ModalityPartition((0, 1, 2), (3, 4, 5))
        rep = imf_profiles(ws, part)
        layers = [residual_attention(w) for w in ws]
        for j in range(1, 5):
            assert rep.get(1, j) == pytest.approx(imf(attention_flow(layers, 1, j), part), abs=1e-14)
            assert rep.get(j, j) == pytest.approx(imf(layers[j - 1], part), abs=1e-14)
        with pytest.raises(KeyError):
            rep.get(3, 2)

    def test_average(self):
        part = ModalityPartition((0,), (1,))
        r1 = imf_profiles([np.eye(2)], part)
        r2 = imf_profiles([np.array([[0.0, 1.0], [1.0, 0.0]])], part)
        assert average_reports([r1, r2]).from_input == [0.25]

    def test_csv_and_json(self, tmp_path):
        rng = np.random.default_rng(0)
        rep = imf_profiles([random_stochastic(rng, 4) for _ in range(3)], ModalityPartition((0, 1), (2, 3)))
        rep.write_csv(tmp_path / "imf.csv")
        lines = (tmp_path / "imf.csv").read_text().splitlines()
        assert lines[0] == "i,j,F" and len(lines) == 1 + 6
        rep.write_json(tmp_path / "imf.json")
        assert "from_input" in (tmp_path / "imf.json").read_text()


def test_row_stochastic_closure():
    rng = np.random.default_rng(11)
    for _ in range(200):
        layers = [residual_attention(random_stochastic(rng, 6)) for _ in range(12)]
        flow = attention_flow(layers, 1, 12).matrix
        np.testing.assert_allclose(flow.sum(axis=1), 1.0, rtol=0, atol=1e-6)
