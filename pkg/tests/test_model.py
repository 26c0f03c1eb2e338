"""Tests for the encoder-role model: tokenizer, attention, gradients, training."""

import math

import numpy as np
import pytest

from flowsentry import nn
from flowsentry.errors import (
    AllPositionsMasked,
    ConfigurationError,
    DimensionMismatch,
    EmptyFit,
    NoLabeledData,
    SequenceTooLong,
)
from flowsentry.ingest import FlowDataset, FlowRecord, Label
from flowsentry.model import (
    EncoderConfig,
    MaskMode,
    Normalizer,
    TrainConfig,
    build_sequences,
    denormalize,
    encode,
    fit_normalizer,
    head_logits,
    init_model_params,
    loss_and_grads,
    normalize,
    predict,
    predict_batch,
    tokenize_sequence,
    train,
)
from flowsentry.sequencer import FlowSequence, SequencerConfig

TINY = EncoderConfig(d_model=8, n_heads=2, n_layers=1, d_ff=16, t_max=4)


def random_sequence(rng, T=4, F=12, n_valid=None, label_value=None):
    n_valid = T if n_valid is None else n_valid
    valid = np.zeros(T, dtype=bool)
    valid[:n_valid] = True
    labels = rng.integers(0, 2, size=T) if label_value is None \
        else np.full(T, label_value, dtype=np.int64)
    return FlowSequence(
        features=rng.normal(size=(T, F)),
        labels=labels.astype(np.int64),
        valid=valid,
        flow_index=np.arange(T),
    )


def identity_normalizer(F=12):
    return Normalizer(mean=np.zeros(F), std=np.ones(F))


class TestNormalizer:
    def test_mean_and_population_std(self):
        feats = np.array([[1.0], [2.0], [3.0]])
        norm = fit_normalizer(feats)
        assert norm.mean[0] == pytest.approx(2.0)
        assert norm.std[0] == pytest.approx(math.sqrt(2.0 / 3.0))
        assert normalize(norm, np.array([2.0]))[0] == pytest.approx(0.0)

    def test_constant_column_clamped(self):
        feats = np.full((5, 2), 7.0)
        norm = fit_normalizer(feats)
        assert np.all(norm.std == Normalizer.EPS)
        assert np.all(normalize(norm, feats[0]) == 0.0)

    def test_denormalize_inverse(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(3.0, 2.5, size=(40, 12))
        norm = fit_normalizer(feats)
        v = feats[7]
        np.testing.assert_allclose(denormalize(norm, normalize(norm, v)), v,
                                   atol=1e-9)

    def test_empty_fit(self):
        with pytest.raises(EmptyFit):
            fit_normalizer(np.zeros((0, 12)))


class TestTokenizer:
    def test_identity_projection(self):
        rng = np.random.default_rng(1)
        seq = random_sequence(rng, T=3, F=12)
        tok = nn.TokenizerParams(projection=np.eye(12), bias=np.zeros(12))
        out = tokenize_sequence(identity_normalizer(), tok, seq)
        np.testing.assert_allclose(out, seq.features)

    def test_zero_projection_gives_bias(self):
        rng = np.random.default_rng(2)
        seq = random_sequence(rng, T=3, F=12)
        bias = rng.normal(size=12)
        tok = nn.TokenizerParams(projection=np.zeros((12, 12)), bias=bias)
        out = tokenize_sequence(identity_normalizer(), tok, seq)
        for row in out:
            np.testing.assert_allclose(row, bias)

    def test_random_affine_matches_hand_loops(self):
        rng = np.random.default_rng(3)
        proj = rng.normal(size=(3, 4))
        bias = rng.normal(size=4)
        feats = rng.normal(size=(1, 3))
        seq = FlowSequence(features=feats, labels=np.zeros(1, dtype=np.int64),
                           valid=np.ones(1, dtype=bool), flow_index=np.zeros(1, dtype=np.int64))
        tok = nn.TokenizerParams(projection=proj, bias=bias)
        out = tokenize_sequence(identity_normalizer(3), tok, seq)
        expected = [sum(feats[0][i] * proj[i][j] for i in range(3)) + bias[j]
                    for j in range(4)]
        np.testing.assert_allclose(out[0], expected)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(4)
        seq = random_sequence(rng, T=2, F=12)
        tok = nn.TokenizerParams(projection=np.zeros((5, 8)), bias=np.zeros(8))
        with pytest.raises(DimensionMismatch):
            tokenize_sequence(identity_normalizer(5), tok, seq)


def hand_layer(d, w_key=None, w_value=None):
    eye = np.eye(d)
    return nn.LayerParams(
        ln1_gain=np.ones(d), ln1_bias=np.zeros(d),
        w_query=eye.copy(),
        w_key=eye.copy() if w_key is None else w_key,
        w_value=eye.copy() if w_value is None else w_value,
        w_out=eye.copy(),
        ln2_gain=np.ones(d), ln2_bias=np.zeros(d),
        ff_w1=np.zeros((d, d)), ff_b1=np.zeros(d),
        ff_w2=np.zeros((d, d)), ff_b2=np.zeros(d))


class TestAttention:
    def test_single_valid_position_outputs_own_value(self):
        rng = np.random.default_rng(5)
        d = 4
        lp = hand_layer(d)
        x = rng.normal(size=(1, 3, d))
        allowed = nn.build_allowed(np.array([[True, False, False]]), causal=False)
        out, cache = nn.attention_forward(lp, x, allowed, n_heads=1)
        ctx = cache[5]
        v = x[0, 0]  # w_value = identity
        np.testing.assert_allclose(ctx[0, 0], v)

    def test_identical_keys_give_uniform_weights_and_mean_value(self):
        d = 2
        lp = hand_layer(d, w_key=np.zeros((d, d)))
        x = np.array([[[1.0, 2.0], [3.0, -4.0]]])
        allowed = nn.build_allowed(np.array([[True, True]]), causal=False)
        out, cache = nn.attention_forward(lp, x, allowed, n_heads=1)
        attn = cache[4]
        np.testing.assert_allclose(attn[0, 0], np.full((2, 2), 0.5))
        expected_mean = x[0].mean(axis=0)
        np.testing.assert_allclose(cache[5][0, 0], expected_mean)
        np.testing.assert_allclose(cache[5][0, 1], expected_mean)

    def test_rows_sum_to_one_over_unmasked_keys(self):
        rng = np.random.default_rng(6)
        cfg = TINY
        params = init_model_params(cfg, rng).encoder
        x = rng.normal(size=(3, 4, cfg.d_model))
        valid = np.array([[True] * 4, [True, True, False, False],
                          [True, False, False, False]])
        allowed = nn.build_allowed(valid, causal=False)
        attn = nn.attention_maps(params.layers[0], x, allowed, cfg.n_heads)
        sums = attn.sum(axis=-1)
        for b in range(3):
            for i in range(4):
                assert sums[b, :, i] == pytest.approx(1.0, abs=1e-6)

    def test_dead_row_under_causal_gives_zero_attention(self):
        # query 0 invalid and nothing before it: all keys excluded
        lp = hand_layer(2)
        x = np.ones((1, 2, 2))
        allowed = nn.build_allowed(np.array([[False, True]]), causal=True)
        out, cache = nn.attention_forward(lp, x, allowed, n_heads=1)
        assert np.all(cache[4][0, :, 0, :] == 0.0)
        assert np.all(np.isfinite(out))


class TestEncode:
    def test_causal_future_invariance(self):
        rng = np.random.default_rng(7)
        cfg = EncoderConfig(d_model=8, n_heads=2, n_layers=2, d_ff=16, t_max=6,
                            mask_mode=MaskMode.CAUSAL)
        params = init_model_params(cfg, rng).encoder
        tokens = rng.normal(size=(6, 8))
        valid = np.ones(6, dtype=bool)
        h = encode(cfg, params, tokens, valid)
        perturbed = tokens.copy()
        perturbed[3:] += rng.normal(size=(3, 8)) * 100
        h2 = encode(cfg, params, perturbed, valid)
        np.testing.assert_array_equal(h[:3], h2[:3])

    def test_permutation_consistency_without_positions(self):
        rng = np.random.default_rng(8)
        cfg = TINY
        params = init_model_params(cfg, rng).encoder
        params.pos[:] = 0.0
        tokens = rng.normal(size=(4, cfg.d_model))
        valid = np.ones(4, dtype=bool)
        h = encode(cfg, params, tokens, valid)
        perm = np.array([2, 0, 3, 1])
        h_perm = encode(cfg, params, tokens[perm], valid)
        np.testing.assert_allclose(h_perm, h[perm], atol=1e-12)

    def test_sequence_too_long(self):
        rng = np.random.default_rng(9)
        params = init_model_params(TINY, rng).encoder
        with pytest.raises(SequenceTooLong):
            encode(TINY, params, rng.normal(size=(5, 8)), np.ones(5, dtype=bool))


class TestHead:
    def test_zero_weights_give_half_probability(self):
        hp = nn.HeadParams(w1=np.zeros((8, 8)), b1=np.zeros(8),
                           w2=np.zeros(8), b2=np.zeros(1))
        h = np.random.default_rng(10).normal(size=(3, 8))
        logits = head_logits(hp, h)
        assert np.all(logits == 0.0)
        assert np.all(nn.sigmoid(logits) == 0.5)

    def test_single_hidden_unit_hand_case(self):
        hp = nn.HeadParams(w1=np.array([[0.5], [-1.0]]), b1=np.array([0.1]),
                           w2=np.array([2.0]), b2=np.array([0.3]))
        h = np.array([[1.0, 0.2]])
        # z1 = 0.5*1 - 1*0.2 + 0.1 = 0.4; relu -> 0.4; logit = 2*0.4 + 0.3
        assert head_logits(hp, h)[0] == pytest.approx(1.1)

    def test_finite_for_arbitrary_input(self):
        rng = np.random.default_rng(11)
        hp = nn.HeadParams(w1=rng.normal(size=(8, 8)), b1=rng.normal(size=8),
                           w2=rng.normal(size=8), b2=rng.normal(size=1))
        h = rng.normal(size=(5, 8)) * 1e6
        assert np.all(np.isfinite(head_logits(hp, h)))


class TestLossAndGrads:
    def test_uniform_logit_loss_is_ln2(self):
        rng = np.random.default_rng(12)
        params = init_model_params(TINY, rng)
        params.head.w1[:] = 0.0
        params.head.b1[:] = 0.0
        params.head.w2[:] = 0.0
        params.head.b2[:] = 0.0
        batch = [random_sequence(rng) for _ in range(3)]
        loss, _ = loss_and_grads(TINY, identity_normalizer(), params, batch)
        assert loss == pytest.approx(math.log(2.0))

    def test_masked_position_label_flip_leaves_loss_unchanged(self):
        rng = np.random.default_rng(13)
        params = init_model_params(TINY, rng)
        seq = random_sequence(rng, n_valid=2)
        loss1, _ = loss_and_grads(TINY, identity_normalizer(), params, [seq])
        flipped = FlowSequence(features=seq.features.copy(),
                               labels=seq.labels.copy(), valid=seq.valid.copy(),
                               flow_index=seq.flow_index.copy())
        flipped.labels[3] = 1 - flipped.labels[3]
        loss2, _ = loss_and_grads(TINY, identity_normalizer(), params, [flipped])
        assert loss1 == loss2

    def test_all_positions_masked(self):
        rng = np.random.default_rng(14)
        params = init_model_params(TINY, rng)
        seq = random_sequence(rng, label_value=-1)
        with pytest.raises(AllPositionsMasked):
            loss_and_grads(TINY, identity_normalizer(), params, [seq])

    @pytest.mark.parametrize("mask_mode", [MaskMode.BIDIRECTIONAL, MaskMode.CAUSAL])
    def test_gradients_match_central_finite_differences(self, mask_mode):
        """Mandatory pre-build check: exact backprop vs numeric differentiation."""
        cfg = EncoderConfig(d_model=8, n_heads=2, n_layers=1, d_ff=16, t_max=4,
                            mask_mode=mask_mode)
        rng = np.random.default_rng(42)
        params = init_model_params(cfg, rng)
        norm = identity_normalizer()
        batch = [random_sequence(rng), random_sequence(rng, n_valid=3)]

        _, grads = loss_and_grads(cfg, norm, params, batch)

        def loss_at():
            return loss_and_grads(cfg, norm, params, batch)[0]

        h = 1e-5
        worst = 0.0
        for (name, arr), (_, g) in zip(nn.iter_arrays(params), nn.iter_arrays(grads)):
            flat = arr.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = loss_at()
                flat[i] = orig - h
                lm = loss_at()
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                denom = max(abs(fd), abs(gflat[i]), 1e-6)
                rel = abs(fd - gflat[i]) / denom
                worst = max(worst, rel)
                assert rel <= 1e-3, f"{name}[{i}]: fd={fd} analytic={gflat[i]}"
        assert worst <= 1e-3


def separable_dataset(n=200, seed=0):
    """Linearly separable labeled flows: byte/packet ranges are disjoint."""
    rng = np.random.default_rng(seed)
    flows = []
    for i in range(n):
        malicious = i % 2 == 0
        if malicious:
            nbytes = int(rng.integers(200_000, 900_000))
            packets = int(rng.integers(2_000, 8_000))
        else:
            nbytes = int(rng.integers(200, 1_500))
            packets = int(rng.integers(1, 12))
        first = int(rng.integers(0, 10_000))
        flows.append(FlowRecord(
            "10.0.0.1", "10.1.0.1", 2000, 3000, 17, first, first + 1000,
            packets, nbytes,
            label=Label.MALICIOUS if malicious else Label.BENIGN))
    return FlowDataset(flows=flows, provenance="separable")


SMALL_CFG = EncoderConfig(d_model=16, n_heads=2, n_layers=1, d_ff=32, t_max=8)
SMALL_SEQ = SequencerConfig(T=8)


@pytest.fixture(scope="module")
def separable_model():
    ds = separable_dataset()
    tc = TrainConfig(lr=3e-3, epochs=8, batch_size=16, seed=5)
    return ds, train(ds, SMALL_SEQ, SMALL_CFG, tc, window_flows=64)


class TestTrain:
    def test_zero_lr_leaves_parameters_at_init(self):
        ds = separable_dataset(n=64)
        tc = TrainConfig(lr=0.0, epochs=2, batch_size=16, seed=3)
        trained = train(ds, SMALL_SEQ, SMALL_CFG, tc, window_flows=64)
        fresh = init_model_params(SMALL_CFG, np.random.default_rng(3))
        for (name, a), (_, b) in zip(nn.iter_arrays(trained.params),
                                     nn.iter_arrays(fresh)):
            np.testing.assert_array_equal(a, b, err_msg=name)

    def test_loss_decreases_on_separable_set(self, separable_model):
        _, model = separable_model
        hist = model.history
        assert all(hist[i] > hist[i + 1] for i in range(4))

    def test_training_accuracy_on_separable_set(self, separable_model):
        ds, model = separable_model
        seqs = build_sequences(ds, SMALL_SEQ, window_flows=64)
        correct = 0
        total = 0
        for s in seqs:
            for p in predict(model, s):
                total += 1
                correct += int(p.label == s.labels[p.position])
        assert total == len(ds)
        assert correct / total >= 0.99

    def test_same_seed_bit_identical(self):
        ds = separable_dataset(n=64)
        tc = TrainConfig(lr=3e-3, epochs=2, batch_size=16, seed=9)
        m1 = train(ds, SMALL_SEQ, SMALL_CFG, tc, window_flows=64)
        m2 = train(ds, SMALL_SEQ, SMALL_CFG, tc, window_flows=64)
        for (name, a), (_, b) in zip(nn.iter_arrays(m1.params),
                                     nn.iter_arrays(m2.params)):
            np.testing.assert_array_equal(a, b, err_msg=name)
        assert m1.history == m2.history

    def test_no_labeled_data(self):
        flows = [f.with_label(Label.UNLABELED) for f in separable_dataset(n=16).flows]
        with pytest.raises(NoLabeledData):
            train(FlowDataset(flows=flows), SMALL_SEQ, SMALL_CFG, TrainConfig())

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(d_model=10, n_heads=4)
        with pytest.raises(ConfigurationError):
            EncoderConfig(dropout_rate=1.0)


class TestPredict:
    def test_masked_positions_absent_and_probabilities_bounded(self, separable_model):
        ds, model = separable_model
        rng = np.random.default_rng(20)
        seq = random_sequence(rng, T=8, F=12, n_valid=5)
        preds = predict(model, seq)
        assert [p.position for p in preds] == [0, 1, 2, 3, 4]
        assert all(0.0 <= p.probability <= 1.0 for p in preds)

    def test_batch_matches_single(self, separable_model):
        ds, model = separable_model
        seqs = build_sequences(ds, SMALL_SEQ, window_flows=64)[:5]
        batch = predict_batch(model, seqs)
        for i, s in enumerate(seqs):
            single = predict(model, s)
            for p in single:
                assert batch[i, p.position] == pytest.approx(p.probability)
