"""Tests for the mapping network, the contrastive losses and their hand-derived gradients."""

import sys
from dataclasses import replace

import numpy as np
import pytest

from utils.config import EncoderConfig, LossConfig, substream
from utils.encoders import RESERVED_WORDS, FrozenEncoders
from utils.errors import BatchSizeError, DimensionMismatchError, InvalidInputError
from utils.pcm import (
    PARAM_NAMES,
    MappingParams,
    align_loss,
    analytic_grads,
    compose_loss,
    contrastive_pair_loss,
    finite_diff_check,
    init_mapping,
    map_backward,
    map_forward,
    total_loss_and_grads,
)
from utils.synth_world import random_triplets

TAU = 10.0


def _unit_rows(rng, m, d):
    M = rng.normal(size=(m, d))
    return M / np.linalg.norm(M, axis=1, keepdims=True)


class TestMapping:
    def test_same_seed_same_params(self):
        a = init_mapping(8, 8, substream(3, "init"))
        b = init_mapping(8, 8, substream(3, "init"))
        np.testing.assert_array_equal(a.to_vector(), b.to_vector())

    def test_shapes(self):
        params = init_mapping(8, 8, np.random.default_rng(0))
        assert params.W1.shape == (8, 8) and params.W2.shape == (8, 8) and params.W3.shape == (8, 8)
        assert params.b3.shape == (8,)

    def test_zero_weights(self):
        params = init_mapping(6, 6, np.random.default_rng(0))
        params = MappingParams(*(np.zeros_like(arr) for arr in params.arrays().values()))
        S, _ = map_forward(params, np.ones(6))
        np.testing.assert_array_equal(S, 0.0)

    def test_identity_mode(self):
        eye, zero = np.eye(5), np.zeros(5)
        params = MappingParams(eye, zero, eye.copy(), zero.copy(), eye.copy(), zero.copy(), activation="identity")
        v = np.random.default_rng(1).normal(size=5)
        S, _ = map_forward(params, v)
        np.testing.assert_allclose(S, v)

    def test_dimension_mismatch(self):
        params = init_mapping(6, 6, np.random.default_rng(0))
        with pytest.raises(DimensionMismatchError):
            map_forward(params, np.ones(4))

    def test_stale_cache_rejected(self):
        params = init_mapping(4, 4, np.random.default_rng(0))
        _, cache = map_forward(params, np.ones(4))
        params.bump()
        with pytest.raises(InvalidInputError):
            map_backward(params, cache, np.ones((1, 4)))

    @pytest.mark.parametrize("activation", ["gelu", "tanh", "identity"])
    def test_backward_matches_finite_difference(self, activation):
        rng = np.random.default_rng(2)
        params = init_mapping(5, 4, rng, activation=activation)
        X, U = rng.normal(size=(3, 5)), rng.normal(size=(3, 4))
        S, cache = map_forward(params, X)
        grads = map_backward(params, cache, U)
        h = 1e-6
        for name in PARAM_NAMES:
            arr = getattr(params, name).reshape(-1)
            for idx in range(0, arr.size, 3):
                original = arr[idx]
                arr[idx] = original + h
                up = np.sum(U * map_forward(params, X)[0])
                arr[idx] = original - h
                down = np.sum(U * map_forward(params, X)[0])
                arr[idx] = original
                assert grads[name].reshape(-1)[idx] == pytest.approx((up - down) / (2 * h), rel=1e-6, abs=1e-8)


class TestContrastive:
    def test_orthonormal_closed_form(self):
        loss, _, _ = contrastive_pair_loss(np.eye(4), np.eye(4), 1.0)
        assert abs(loss - np.log(1 + 3 * np.exp(-1.0))) < 1e-9
        assert abs(loss - 0.743667) < 1e-6

    def test_single_pair_is_zero(self):
        v = np.array([[0.6, 0.8]])
        assert contrastive_pair_loss(v, v, 5.0)[0] == 0.0

    def test_tiny_tau_limit(self):
        rng = np.random.default_rng(0)
        loss, _, _ = contrastive_pair_loss(_unit_rows(rng, 8, 6), _unit_rows(rng, 8, 6), 1e-8)
        assert abs(loss - np.log(8)) < 1e-6

    def test_symmetric_pair_closed_form(self):
        eye = np.eye(2)
        t2i, _, _ = contrastive_pair_loss(eye, eye, TAU)
        i2t, _, _ = contrastive_pair_loss(eye, eye, TAU)
        assert t2i + i2t == pytest.approx(2 * np.log(1 + np.exp(-TAU)), rel=1e-12)

    def test_large_tau_is_stable(self):
        rng = np.random.default_rng(1)
        loss, dA, dB = contrastive_pair_loss(_unit_rows(rng, 6, 4), _unit_rows(rng, 6, 4), 1e4)
        assert np.isfinite(loss) and np.all(np.isfinite(dA)) and np.all(np.isfinite(dB))

    def test_rejects_bad_input(self):
        with pytest.raises(InvalidInputError):
            contrastive_pair_loss(np.eye(3), np.eye(3), 0.0)
        with pytest.raises(InvalidInputError):
            contrastive_pair_loss(2 * np.eye(3), np.eye(3), 1.0)

    def test_gradients_match_finite_difference(self):
        rng = np.random.default_rng(2)
        A, B = _unit_rows(rng, 4, 3), _unit_rows(rng, 4, 3)
        _, dA, dB = contrastive_pair_loss(A, B, 3.0)
        h = 1e-7
        for M, dM, which in ((A, dA, 0), (B, dB, 1)):
            for i in range(4):
                for j in range(3):
                    M[i, j] += h
                    up = contrastive_pair_loss(A, B, 3.0)[0]
                    M[i, j] -= 2 * h
                    down = contrastive_pair_loss(A, B, 3.0)[0]
                    M[i, j] += h
                    assert dM[i, j] == pytest.approx((up - down) / (2 * h), abs=1e-6)


class TestLosses:
    def test_compose_needs_two(self, params16, triplets8, encoders16):
        with pytest.raises(BatchSizeError):
            compose_loss(params16, triplets8[:1], encoders16, LossConfig(tau=TAU))

    def test_align_needs_two(self, params16, triplets8, encoders16):
        with pytest.raises(BatchSizeError):
            align_loss(params16, np.ones((1, 16)), encoders16, LossConfig(tau=TAU))

    def test_total_is_sum(self, params16, triplets8, encoders16):
        config = LossConfig(tau=TAU)
        breakdown, _ = total_loss_and_grads(params16, triplets8, encoders16, config)
        l_compose, _ = compose_loss(params16, triplets8, encoders16, config)
        l_align, _ = align_loss(params16, triplets8, encoders16, config)
        assert breakdown.l_compose == pytest.approx(l_compose, rel=1e-12)
        assert breakdown.l_align == pytest.approx(l_align, rel=1e-12)
        assert breakdown.l_total == pytest.approx(l_compose + l_align, rel=1e-12)

    def test_disabled_term_contributes_nothing(self, params16, triplets8, encoders16):
        config = LossConfig(tau=TAU, use_compose=False)
        breakdown, grads = total_loss_and_grads(params16, triplets8, encoders16, config)
        assert breakdown.l_compose == 0.0
        align_only = analytic_grads(params16, triplets8, encoders16, LossConfig(tau=TAU), which="align")
        for name in PARAM_NAMES:
            np.testing.assert_allclose(grads[name], align_only[name], atol=1e-15)

    def test_align_against_targets_differs(self, params16, triplets8, encoders16):
        ref, _ = align_loss(params16, triplets8, encoders16, LossConfig(tau=TAU))
        tgt, _ = align_loss(params16, triplets8, encoders16, LossConfig(tau=TAU, align_target="target"))
        assert ref != tgt

    @pytest.mark.parametrize("loss_fn", [compose_loss, align_loss])
    def test_batch_order_does_not_matter(self, params16, triplets8, encoders16, loss_fn):
        config = LossConfig(tau=TAU)
        order = np.random.default_rng(5).permutation(len(triplets8))
        shuffled = [triplets8[i] for i in order]
        assert abs(loss_fn(params16, shuffled, encoders16, config)[0]
                   - loss_fn(params16, triplets8, encoders16, config)[0]) < 1e-12

    def test_align_ignores_captions(self, params16, triplets8, encoders16):
        config = LossConfig(tau=TAU)
        rng = np.random.default_rng(6)
        recaptioned = []
        for t in triplets8:
            tokens = [int(rng.integers(len(RESERVED_WORDS), encoders16.vocab.size)) for _ in range(5)]
            recaptioned.append(replace(t, caption_tokens=tokens, caption_embedding=encoders16.encode_caption(tokens)))
        base, base_dS = align_loss(params16, triplets8, encoders16, config)
        moved, moved_dS = align_loss(params16, recaptioned, encoders16, config)
        assert moved == base
        np.testing.assert_array_equal(moved_dS, base_dS)

    def test_align_target_needs_targets(self, params16, encoders16):
        with pytest.raises(InvalidInputError):
            align_loss(params16, np.ones((2, 16)), encoders16, LossConfig(align_target="target"))


class TestGradCheck:
    @pytest.mark.parametrize("which", ["compose", "align", "total"])
    def test_analytic_matches_numeric(self, params16, triplets8, encoders16, which):
        report = finite_diff_check(params16, triplets8, encoders16, LossConfig(tau=TAU), which=which)
        assert report.n_coords == params16.to_vector().size
        assert report.passed, report.to_dict()
        assert report.max_rel_err <= 1e-5

    def test_corrupted_gradient_fails(self, params16, triplets8, encoders16):
        config = LossConfig(tau=TAU)
        grads = analytic_grads(params16, triplets8, encoders16, config)
        flat = grads["W3"].reshape(-1)
        flat[int(np.argmax(np.abs(flat)))] *= 2.0
        report = finite_diff_check(params16, triplets8, encoders16, config, grads=grads)
        assert not report.passed
        assert report.worst[0] == "W3"

    def test_step_size_error_curve_is_u_shaped(self, params16, triplets8, encoders16):
        # truncation error grows with h, cancellation error with 1/h
        config = LossConfig(tau=TAU)
        grads = analytic_grads(params16, triplets8, encoders16, config)
        errs = {h: finite_diff_check(params16, triplets8, encoders16, config, h=h, grads=grads).max_rel_err
                for h in (1e-4, 1e-5, 1e-6)}
        assert errs[1e-5] < errs[1e-4]
        assert errs[1e-5] < errs[1e-6]

    def test_subset_larger_than_network(self):
        encoders = FrozenEncoders.build(EncoderConfig(d=4), list(RESERVED_WORDS) + [f"w{i}" for i in range(6)])
        params = init_mapping(4, 4, substream(0, "init"))
        report = finite_diff_check(params, random_triplets(encoders, 4), encoders, LossConfig(tau=TAU),
                                   max_coords=10, rng=np.random.default_rng(0))
        assert report.n_coords == params.to_vector().size == 60

    def test_needs_float64(self, params16, triplets8, encoders16):
        with pytest.raises(InvalidInputError):
            finite_diff_check(params16.astype(np.float32), triplets8, encoders16, LossConfig(tau=TAU))

    def test_check_does_not_modify_params(self, params16, triplets8, encoders16):
        before = params16.to_vector().copy()
        finite_diff_check(params16, triplets8, encoders16, LossConfig(tau=TAU), which="align", max_coords=200)
        np.testing.assert_array_equal(params16.to_vector(), before)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
