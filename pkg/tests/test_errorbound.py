import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentzip.errorbound import (CorrectionPayload, apply_correction, decode_payload,
                                  encode_payload, fit_basis, project, select_and_quantize)
from latentzip.errors import ConfigError, DataError


def _random_basis(rng, d=16, b=8):
    return fit_basis(rng.normal(size=(10 * d, d)), b)


class TestFitBasis:
    def test_rank_one_corpus(self):
        rng = np.random.default_rng(0)
        direction = rng.normal(size=8)
        direction /= np.linalg.norm(direction)
        corpus = np.outer(rng.normal(size=100), direction)
        basis = fit_basis(corpus, 2)
        cos = abs(basis.matrix[:, 0] @ direction)
        assert cos > 1 - 1e-6

    def test_orthonormal(self):
        basis = _random_basis(np.random.default_rng(1))
        gram = basis.matrix.T @ basis.matrix
        np.testing.assert_allclose(gram, np.eye(basis.n_components), atol=1e-6)

    def test_matches_dense_eigendecomposition(self):
        rng = np.random.default_rng(2)
        corpus = rng.normal(size=(300, 12)) @ np.diag(np.linspace(3, 0.1, 12))
        basis = fit_basis(corpus, 6)
        centered = corpus - corpus.mean(axis=0)
        cov = centered.T @ centered / (len(corpus) - 1)
        eigvals = np.sort(np.linalg.eigh(cov)[0])[::-1]
        np.testing.assert_allclose(basis.explained_variance, eigvals[:6],
                                   rtol=1e-8, atol=1e-10)

    def test_variance_ordering(self):
        basis = _random_basis(np.random.default_rng(3))
        assert np.all(np.diff(basis.explained_variance) <= 1e-12)

    def test_corpus_size_checked(self):
        with pytest.raises(DataError):
            fit_basis(np.zeros((3, 8)), 5)


class TestProject:
    def test_zero_residual(self):
        basis = _random_basis(np.random.default_rng(4))
        np.testing.assert_array_equal(project(np.zeros(16), basis), np.zeros(8))

    def test_basis_aligned_residual(self):
        basis = _random_basis(np.random.default_rng(5))
        r = 3.5 * basis.matrix[:, 2]
        c = project(r, basis)
        want = np.zeros(8)
        want[2] = 3.5
        np.testing.assert_allclose(c, want, atol=1e-9)

    def test_projection_never_grows_norm(self):
        rng = np.random.default_rng(6)
        basis = _random_basis(rng)
        for _ in range(50):
            r = rng.normal(size=16)
            c = project(r, basis)
            assert np.linalg.norm(c) <= np.linalg.norm(r) + 1e-9
        # equality iff the residual lies in the span
        r_in = basis.matrix @ rng.normal(size=8)
        assert np.linalg.norm(project(r_in, basis)) == pytest.approx(np.linalg.norm(r_in))


class TestSelectAndQuantize:
    def test_already_within_bound(self):
        rng = np.random.default_rng(7)
        basis = _random_basis(rng)
        x = rng.normal(size=16) * 0.001
        payload = select_and_quantize(x, np.zeros(16), basis, tau=1.0)
        assert payload.is_empty

    def test_hand_example_identity_basis(self):
        # identity basis in D=2: residual (3, 4); tau=4 keeps only the coefficient 4
        from latentzip.errorbound import ResidualBasis

        basis = ResidualBasis(matrix=np.eye(2), explained_variance=np.ones(2),
                              corpus_fingerprint="unit")
        payload = select_and_quantize(np.array([3.0, 4.0]), np.zeros(2), basis, tau=4.0)
        assert not payload.is_fallback
        np.testing.assert_array_equal(payload.indices, [1])
        corrected = apply_correction(np.zeros(2), payload, basis)
        err = np.linalg.norm(np.array([3.0, 4.0]) - corrected)
        assert err <= 4.0
        assert err == pytest.approx(3.0, abs=payload.step)

    def test_out_of_span_residual_falls_back(self):
        rng = np.random.default_rng(8)
        basis = fit_basis(rng.normal(size=(50, 16)), 4)
        # residual orthogonal to the 4-dim span
        q, _ = np.linalg.qr(np.hstack([basis.matrix, rng.normal(size=(16, 12))]))
        r = 10.0 * q[:, 10]
        target = r.copy()
        payload = select_and_quantize(target, np.zeros(16), basis, tau=0.5)
        assert payload.is_fallback
        corrected = apply_correction(np.zeros(16), payload, basis)
        np.testing.assert_array_equal(corrected, target)  # bit-exact

    def test_tau_must_be_positive(self):
        basis = _random_basis(np.random.default_rng(9))
        with pytest.raises(ConfigError):
            select_and_quantize(np.ones(16), np.zeros(16), basis, tau=0.0)

    def test_greedy_matches_brute_force(self):
        # for orthonormal U and fixed M, keeping the largest |c_i| minimizes the
        # in-span residual; verify against exhaustive subset search
        rng = np.random.default_rng(10)
        for trial in range(20):
            d, b = 8, 6
            basis = fit_basis(rng.normal(size=(60, d)), b)
            r = rng.normal(size=d)
            c = project(r, basis)
            for m in range(1, b + 1):
                greedy_idx = np.sort(np.argsort(-np.abs(c), kind="stable")[:m])
                greedy_left = r @ r - np.sum(c[greedy_idx] ** 2)
                best = min(
                    float(r @ r - np.sum(c[list(sub)] ** 2))
                    for sub in itertools.combinations(range(b), m)
                )
                assert greedy_left <= best + 1e-9

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_hard_guarantee(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(4, 24))
        b = int(rng.integers(1, d + 1))
        basis = fit_basis(rng.normal(size=(3 * d, d)), b)
        target = rng.normal(size=d) * 10.0 ** rng.integers(-3, 4)
        recon = target + rng.normal(size=d) * 10.0 ** rng.integers(-3, 4)
        tau = float(10.0 ** rng.uniform(-6, 2))
        payload = decode_payload(encode_payload(
            select_and_quantize(target, recon, basis, tau)))
        corrected = apply_correction(recon, payload, basis)
        assert np.linalg.norm(target - corrected) <= tau

    def test_payload_size_monotone_in_tau(self):
        rng = np.random.default_rng(11)
        basis = fit_basis(rng.normal(size=(200, 32)), 16)
        target = rng.normal(size=32) * 5
        recon = np.zeros(32)
        sizes = []
        for tau in [0.05, 0.1, 0.5, 1.0, 5.0, 50.0]:
            payload = select_and_quantize(target, recon, basis, tau)
            sizes.append(len(encode_payload(payload)))
        assert all(a >= b for a, b in zip(sizes, sizes[1:]))


class TestPayloadCodec:
    def test_empty_round_trip(self):
        payload = CorrectionPayload(np.empty(0, np.int64), np.empty(0, np.int64), 1.0)
        out = decode_payload(encode_payload(payload))
        assert out.is_empty

    def test_random_round_trip(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            m = int(rng.integers(1, 20))
            indices = np.sort(rng.choice(64, size=m, replace=False)).astype(np.int64)
            coeffs = rng.integers(-10_000, 10_000, size=m)
            payload = CorrectionPayload(indices, coeffs, float(rng.random() + 1e-3))
            out = decode_payload(encode_payload(payload))
            np.testing.assert_array_equal(out.indices, payload.indices)
            np.testing.assert_array_equal(out.coeffs, payload.coeffs)
            assert out.step == payload.step

    def test_fallback_round_trip(self):
        rng = np.random.default_rng(13)
        values = rng.normal(size=100)
        payload = CorrectionPayload(np.empty(0, np.int64), np.empty(0, np.int64), 1.0,
                                    fallback=values)
        out = decode_payload(encode_payload(payload))
        np.testing.assert_array_equal(out.fallback, values)

    def test_coded_size_beats_raw_floats(self):
        # coarse quantization: coded coefficients cost far less than 8-byte floats
        rng = np.random.default_rng(14)
        basis = fit_basis(rng.normal(size=(300, 64)), 32)
        target = basis.matrix @ rng.normal(size=32) * 3.0
        payload = select_and_quantize(target, np.zeros(64), basis, tau=0.5)
        assert not payload.is_fallback and payload.indices.size > 0
        raw_bytes = payload.indices.size * 8
        assert len(encode_payload(payload)) < raw_bytes

    def test_truncated_payload_rejected(self):
        rng = np.random.default_rng(15)
        payload = CorrectionPayload(np.array([1, 5]), np.array([100, -7]), 0.25)
        data = encode_payload(payload)
        with pytest.raises(DataError):
            decode_payload(data[:2])
