"""Tests for the five-term objective with hand-derived values."""

import math

import numpy as np
import pytest

from moereid.errors import ContractError, LabelError, SamplingError
from moereid.losses import (
    LossBreakdown,
    PairSample,
    ce_loss,
    contrastive_loss,
    lts_loss,
    sts_loss,
    total_loss,
    ts_loss,
)
from moereid.moe_core import (
    BiometricEmbedding,
    FrameEmbeddings,
    GatingTensor1,
    ModelConfig,
    ModelParams,
    forward,
)
from moereid.numerics import Tensor, grad_check

# Frozen scalar oracle: ln(1 + e^-1) for logits (1, 0) with true class 0.
CE_ONE_ZERO = 0.31326168751822286


def fake_embedding(long_frames=None, short_frames=None, long_vec=None,
                   short_vec=None, temporal_vec=None, fused=None, d=2, t=2):
    def arr(value, shape):
        return Tensor(np.zeros(shape) if value is None else np.asarray(value,
                                                                       float))
    frames = FrameEmbeddings(long=arr(long_frames, (t, d)),
                             short=arr(short_frames, (t, d)),
                             temporal=arr(None, (t, d)))
    return BiometricEmbedding(
        long=arr(long_vec, (d,)), short=arr(short_vec, (d,)),
        temporal=arr(temporal_vec, (d,)), fused=arr(fused, (d,)),
        w2=Tensor(np.full(3, 1.0 / 3.0)),
        gate1=GatingTensor1(Tensor(np.ones((t, 1, 1, 3)))),
        frames=frames, logits=Tensor(np.zeros(2)))


def pair(first, second, subjects=(0, 0)) -> PairSample:
    return PairSample(first, second, subjects[0], subjects[1])


def tiny_setup(seed=0, n1=2):
    config = ModelConfig(d=2, K=2, T=2, n1=n1, M=1, heads=1,
                         num_identities=3, seed=seed)
    return config, ModelParams.build(config)


class TestCeLoss:
    def test_uniform_logits_give_log_n(self):
        config, params = tiny_setup()
        params.tensors["classifier.w"].data[...] = 0.0
        params.tensors["classifier.b"].data[...] = 0.0
        fused = Tensor(np.random.default_rng(0).normal(size=2))
        loss = ce_loss(fused, 1, params)
        assert abs(float(loss.data) - math.log(3)) < 1e-12

    def test_one_zero_logit_oracle(self):
        config, params = tiny_setup()
        params.tensors["classifier.w"].data[...] = 0.0
        params.tensors["classifier.b"].data[...] = [1.0, 0.0, -1e9]
        loss = ce_loss(Tensor(np.zeros(2)), 0, params)
        assert abs(float(loss.data) - CE_ONE_ZERO) < 1e-12

    def test_saturates_at_large_margin(self):
        config, params = tiny_setup()
        params.tensors["classifier.w"].data[...] = 0.0
        params.tensors["classifier.b"].data[...] = [20.0, 0.0, 0.0]
        loss = ce_loss(Tensor(np.zeros(2)), 0, params)
        assert 0.0 <= float(loss.data) < 1e-3

    def test_out_of_range_label(self):
        config, params = tiny_setup()
        with pytest.raises(LabelError):
            ce_loss(Tensor(np.zeros(2)), 3, params)
        with pytest.raises(LabelError):
            ce_loss(Tensor(np.zeros(2)), -1, params)

    def test_nonnegative_and_stable_at_extreme_logits(self):
        config, params = tiny_setup()
        params.tensors["classifier.b"].data[...] = [500.0, -500.0, 0.0]
        params.tensors["classifier.w"].data[...] = 0.0
        loss = ce_loss(Tensor(np.zeros(2)), 2, params)
        assert np.isfinite(loss.data)
        assert float(loss.data) >= 0.0


class TestLtsLoss:
    def test_identical_everything_is_zero(self):
        e = fake_embedding(long_frames=[[1.0, 2.0], [1.0, 2.0]],
                           long_vec=[1.0, 2.0])
        assert float(lts_loss(pair(e, e)).data) == 0.0

    def test_single_frame_reduces_to_cross_term(self):
        a = fake_embedding(long_frames=[[1.0, 0.0]], long_vec=[1.0, 0.0], t=1)
        b = fake_embedding(long_frames=[[0.0, 2.0]], long_vec=[0.0, 2.0], t=1)
        assert abs(float(lts_loss(pair(a, b)).data) - 5.0) < 1e-12

    def test_hand_value(self):
        # F1 rows (0),(2) and F2 rows (1),(1), both means 1:
        # cross 0, scatter (8 + 0) / T^2 = 2.
        a = fake_embedding(long_frames=[[0.0], [2.0]], long_vec=[1.0], d=1)
        b = fake_embedding(long_frames=[[1.0], [1.0]], long_vec=[1.0], d=1)
        assert abs(float(lts_loss(pair(a, b)).data) - 2.0) < 1e-12

    def test_rejects_cross_identity(self):
        e = fake_embedding()
        with pytest.raises(ContractError):
            lts_loss(pair(e, e, subjects=(0, 1)))

    def test_frame_order_invariance(self):
        rng = np.random.default_rng(0)
        frames = rng.normal(size=(4, 3))
        a = fake_embedding(long_frames=frames, long_vec=frames.mean(0),
                           d=3, t=4)
        b = fake_embedding(long_frames=frames[::-1].copy(),
                           long_vec=frames.mean(0), d=3, t=4)
        other = fake_embedding(long_frames=rng.normal(size=(4, 3)),
                               long_vec=[0, 0, 0], d=3, t=4)
        assert abs(float(lts_loss(pair(a, other)).data)
                   - float(lts_loss(pair(b, other)).data)) < 1e-12


class TestStsLoss:
    def test_constant_per_video_is_zero(self):
        a = fake_embedding(short_frames=[[5.0, 5.0], [5.0, 5.0]])
        b = fake_embedding(short_frames=[[-2.0, 0.0], [-2.0, 0.0]])
        assert float(sts_loss(pair(a, b)).data) == 0.0

    def test_single_frame_is_zero(self):
        a = fake_embedding(short_frames=[[1.0, 2.0]], t=1)
        assert float(sts_loss(pair(a, a)).data) == 0.0

    def test_hand_value(self):
        # Rows (0),(1) scatter 2; rows (0),(3) scatter 18; (2+18)/4 = 5.
        a = fake_embedding(short_frames=[[0.0], [1.0]], d=1)
        b = fake_embedding(short_frames=[[0.0], [3.0]], d=1)
        assert abs(float(sts_loss(pair(a, b)).data) - 5.0) < 1e-12

    def test_allows_cross_identity(self):
        a = fake_embedding(short_frames=[[0.0, 0.0], [1.0, 1.0]])
        loss = sts_loss(pair(a, a, subjects=(0, 1)))
        assert float(loss.data) > 0.0


class TestTsLoss:
    def test_equal_vectors_zero(self):
        e = fake_embedding(temporal_vec=[3.0, -1.0])
        assert float(ts_loss(pair(e, e)).data) == 0.0

    def test_unit_vectors(self):
        a = fake_embedding(temporal_vec=[1.0, 0.0])
        b = fake_embedding(temporal_vec=[0.0, 1.0])
        assert abs(float(ts_loss(pair(a, b)).data) - 2.0) < 1e-15

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=3), rng.normal(size=3)
        a = fake_embedding(temporal_vec=x, d=3)
        b = fake_embedding(temporal_vec=y, d=3)
        expected = sum((x[i] - y[i]) ** 2 for i in range(3))
        assert abs(float(ts_loss(pair(a, b)).data) - expected) < 1e-12

    def test_rejects_cross_identity(self):
        e = fake_embedding()
        with pytest.raises(ContractError):
            ts_loss(pair(e, e, subjects=(1, 2)))


class TestContrastiveLoss:
    def test_positive_identical_is_zero(self):
        e = fake_embedding(fused=[1.0, 1.0])
        assert float(contrastive_loss(pair(e, e), margin=4.0).data) == 0.0

    def test_negative_identical_hits_full_margin(self):
        e = fake_embedding(fused=[1.0, 1.0])
        loss = contrastive_loss(pair(e, e, subjects=(0, 1)), margin=4.0)
        assert abs(float(loss.data) - 8.0) < 1e-12

    def test_negative_beyond_margin_is_zero(self):
        a = fake_embedding(fused=[0.0, 0.0])
        b = fake_embedding(fused=[5.0, 0.0])
        loss = contrastive_loss(pair(a, b, subjects=(0, 1)), margin=4.0)
        assert float(loss.data) == 0.0

    def test_monotone_in_distance(self):
        distances = np.linspace(0.0, 6.0, 25)
        pos, neg = [], []
        for dist in distances:
            a = fake_embedding(fused=[0.0, 0.0])
            b = fake_embedding(fused=[dist, 0.0])
            pos.append(float(contrastive_loss(pair(a, b), 4.0).data))
            neg.append(float(
                contrastive_loss(pair(a, b, subjects=(0, 1)), 4.0).data))
        assert np.all(np.diff(pos) >= 0.0)
        assert np.all(np.diff(neg) <= 0.0)


def _batch_from_model(config, params, subjects, seed=0):
    rng = np.random.default_rng(seed)
    embeddings = [forward(Tensor(rng.normal(size=(config.T, config.K,
                                                  4 * config.d)) * 0.5),
                          params, config)
                  for _ in subjects]
    samples = list(zip(embeddings, subjects))
    pairs = []
    for i in range(len(subjects)):
        for j in range(i + 1, len(subjects)):
            pairs.append(PairSample(embeddings[i], embeddings[j],
                                    subjects[i], subjects[j]))
    return samples, pairs


class TestTotalLoss:
    def test_weighted_combination_identity(self):
        config, params = tiny_setup()
        samples, pairs = _batch_from_model(config, params, [0, 0, 1, 1])
        out = total_loss(samples, pairs, params, config)
        assert isinstance(out, LossBreakdown)
        expected = (out.ce + config.alpha * (out.lts + out.sts + out.ts)
                    + config.beta * out.contrastive)
        assert abs(float(out.total.data) - expected) < 1e-12
        for value in (out.ce, out.lts, out.sts, out.ts, out.contrastive):
            assert value >= 0.0

    def test_zero_weights_reduce_to_ce(self):
        config, params = tiny_setup()
        config.alpha = 0.0
        config.beta = 0.0
        samples, pairs = _batch_from_model(config, params, [0, 0, 1])
        out = total_loss(samples, pairs, params, config)
        assert abs(float(out.total.data) - out.ce) < 1e-15

    def test_all_zero_components_give_zero(self):
        config, params = tiny_setup()
        e = fake_embedding()  # everything zero
        # CE contributes ln(N) with zero logits, so zero the classifier
        # and compare against that constant alone.
        params.tensors["classifier.w"].data[...] = 0.0
        params.tensors["classifier.b"].data[...] = 0.0
        samples = [(e, 0)]
        pairs = [PairSample(e, e, 0, 0)]
        out = total_loss(samples, pairs, params, config)
        assert out.lts == out.sts == out.ts == out.contrastive == 0.0
        assert abs(float(out.total.data) - math.log(3)) < 1e-12

    def test_no_positive_pair_raises(self):
        config, params = tiny_setup()
        samples, pairs = _batch_from_model(config, params, [0, 1])
        with pytest.raises(SamplingError):
            total_loss(samples, pairs, params, config)

    def test_empty_batch_raises(self):
        config, params = tiny_setup()
        with pytest.raises(SamplingError):
            total_loss([], [], params, config)


class TestObjectiveGradient:
    def _loss_from_stacked(self, x, params, config, subjects):
        embeddings = [forward(x[i], params, config)
                      for i in range(len(subjects))]
        samples = list(zip(embeddings, subjects))
        pairs = [PairSample(embeddings[0], embeddings[1], subjects[0],
                            subjects[1]),
                 PairSample(embeddings[0], embeddings[2], subjects[0],
                            subjects[2])]
        return total_loss(samples, pairs, params, config).total

    def test_full_objective_matches_finite_differences(self):
        config, params = tiny_setup(seed=3)
        subjects = [0, 0, 1]
        point = Tensor(np.random.default_rng(5).normal(
            size=(3, config.T, config.K, 4 * config.d)) * 0.5)
        fn = lambda x: self._loss_from_stacked(x, params, config, subjects)
        report = grad_check(fn, point, eps=1e-5, tol=1e-4)
        assert report.passed, str(report)

    def test_parameter_gradients_match_finite_differences(self):
        config, params = tiny_setup(seed=4)
        subjects = [0, 0, 1]
        volumes = Tensor(np.random.default_rng(6).normal(
            size=(3, config.T, config.K, 4 * config.d)) * 0.5)

        for name in ("classifier.w", "gate1.w1", "temporal.q0", "long.w2",
                     "gate2.w2", "expert1.0.w", "temporal.block0.attn.wq"):
            original = params.tensors[name]

            def fn(w):
                params.tensors[name] = w
                try:
                    return self._loss_from_stacked(volumes, params, config,
                                                   subjects)
                finally:
                    params.tensors[name] = original

            report = grad_check(fn, original, eps=1e-5, tol=1e-4)
            assert report.passed, f"{name}: {report}"
