import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affuse import autodiff as ad
from affuse.autodiff import Tensor
from affuse.encoders import (EMBED_DIM, ClassifierHead, GruEncoder, ModelConfig, MultimodalModel,
                             ProjectionLayer, TraceEncoder, classify, cross_entropy,
                             cross_entropy_from_probs, project)
from affuse.errors import DimensionError, ValidationError

from conftest import numeric_grad, rel_error


def zero_out(module):
    for p in module.params.values():
        p.data[...] = 0.0


class TestGru:
    def test_zero_weights_zero_embedding(self):
        enc = GruEncoder(6, 8)
        zero_out(enc)
        seq = np.random.default_rng(0).normal(size=(7, 6))
        np.testing.assert_array_equal(enc.encode_sequence(seq).data, np.zeros((1, 8)))

    def test_single_step_closed_form(self):
        enc = GruEncoder(1, 1)
        vals = {"W_z": 0.7, "U_z": -0.3, "b_z": 0.1, "W_r": -0.4, "U_r": 0.9, "b_r": 0.2,
                "W_h": 1.3, "U_h": 0.5, "b_h": -0.6}
        for k, v in vals.items():
            enc.params[k].data[...] = v
        x = 0.8
        sig = lambda a: 1 / (1 + math.exp(-a))
        z = sig(vals["W_z"] * x + vals["b_z"])
        cand = math.tanh(vals["W_h"] * x + vals["b_h"])  # h0 = 0 kills the r * h term
        expected = z * cand
        out = enc.encode_sequence(np.array([[x]])).data
        assert out.shape == (1, 1)
        assert abs(out[0, 0] - expected) < 1e-15

    def test_eval_deterministic_and_train_stochastic(self):
        enc = GruEncoder(6, 16, dropout=0.1, rng=np.random.default_rng(2))
        seq = np.random.default_rng(1).normal(size=(5, 6))
        a, b = enc.encode_sequence(seq).data, enc.encode_sequence(seq).data
        assert a.tobytes() == b.tobytes()
        rng = np.random.default_rng(0)
        c = enc.encode_sequence(seq, training=True, rng=rng).data
        assert not np.array_equal(a, c)

    def test_ragged_batch_matches_single(self):
        enc = GruEncoder(6, 8, rng=np.random.default_rng(4))
        rng = np.random.default_rng(3)
        seqs = [rng.normal(size=(n, 6)) for n in (2, 5, 3)]
        batched = enc.forward(seqs).data
        for b, s in enumerate(seqs):
            np.testing.assert_allclose(batched[b], enc.encode_sequence(s).data[0], atol=1e-14)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_hidden_state_bounded(self, T, seed):
        rng = np.random.default_rng(seed)
        enc = GruEncoder(6, 8, rng=rng)
        for p in enc.params.values():
            p.data[...] = rng.uniform(-1, 1, size=p.shape)
        h = enc.encode_sequence(rng.normal(size=(T, 6))).data
        assert np.all(np.abs(h) < 1)
        # saturating weights may round tanh to exactly 1.0 but never beyond
        for p in enc.params.values():
            p.data[...] *= 20
        h = enc.encode_sequence(rng.normal(scale=3, size=(T, 6))).data
        assert np.all(np.abs(h) <= 1)

    def test_empty_sequence(self):
        with pytest.raises(ValidationError):
            GruEncoder(6, 4).encode_sequence(np.zeros((0, 6)))

    def test_wrong_width(self):
        with pytest.raises(DimensionError):
            GruEncoder(6, 4).encode_sequence(np.zeros((3, 5)))


class TestTrace:
    def test_repeated_rows_equal_single(self):
        enc = TraceEncoder(rng=np.random.default_rng(0))
        row = np.random.default_rng(1).normal(size=(1, 768))
        np.testing.assert_allclose(enc.encode_trace(np.repeat(row, 6, axis=0)).data,
                                   enc.encode_trace(row).data, atol=1e-15)

    def test_zero_weights(self):
        enc = TraceEncoder()
        zero_out(enc)
        out = enc.encode_trace(np.random.default_rng(0).normal(size=(4, 768))).data
        np.testing.assert_array_equal(out, np.zeros((1, 64)))

    def test_permutation_invariant(self):
        enc = TraceEncoder(rng=np.random.default_rng(0))
        seq = np.random.default_rng(1).normal(size=(7, 768))
        perm = np.random.default_rng(2).permutation(7)
        np.testing.assert_allclose(enc.encode_trace(seq[perm]).data, enc.encode_trace(seq).data, atol=1e-14)

    def test_empty(self):
        with pytest.raises(ValidationError):
            TraceEncoder().encode_trace(np.zeros((0, 768)))


class TestProjection:
    def test_identity(self):
        p = ProjectionLayer(128)
        p.params["W"].data[...] = np.eye(128)
        e = np.random.default_rng(0).normal(size=(1, 128))
        np.testing.assert_array_equal(project(p, Tensor(e)).data, e)

    def test_constant_bias(self):
        p = ProjectionLayer(64)
        p.params["W"].data[...] = 0.0
        b = np.random.default_rng(0).normal(size=128)
        p.params["B"].data[...] = b
        out = project(p, Tensor(np.ones((1, 64)))).data
        np.testing.assert_array_equal(out[0], b)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(7)
        p = ProjectionLayer(64, rng=rng)
        p.params["B"].data[...] = rng.normal(size=128)
        e = rng.normal(size=(1, 64))
        W, B = p.params["W"].data, p.params["B"].data
        expected = np.zeros(128)
        for j in range(128):
            acc = 0.0
            for i in range(64):
                acc += e[0, i] * W[i, j]
            expected[j] = acc + B[j]
        np.testing.assert_allclose(project(p, Tensor(e)).data[0], expected, atol=1e-12)
        assert project(p, Tensor(e)).shape == (1, EMBED_DIM)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            project(ProjectionLayer(64), Tensor(np.ones((1, 63))))


class TestHead:
    def test_uniform_logits(self):
        head = ClassifierHead()
        zero_out(head)
        np.testing.assert_allclose(classify(head, np.ones(512)).data, [[0.25] * 4], atol=1e-15)

    def test_peaked_logits(self):
        p = ad.softmax(Tensor([[10.0, 0.0, 0.0, 0.0]])).data[0]
        assert np.argmax(p) == 0 and p[0] > 0.999

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        head = ClassifierHead(rng=rng)
        probs = classify(head, rng.normal(size=(20, 512))).data
        assert np.all(np.abs(probs.sum(axis=1) - 1) <= 1e-12)

    def test_wrong_length(self):
        with pytest.raises(DimensionError):
            classify(ClassifierHead(), np.ones(511))


class TestCrossEntropy:
    def test_one_hot(self):
        assert cross_entropy_from_probs(np.eye(4), [0, 1, 2, 3]) < 1e-11

    def test_uniform_is_ln4(self):
        assert abs(cross_entropy_from_probs(np.full((5, 4), 0.25), [0, 1, 3, 2, 2]) - math.log(4)) < 1e-12
        np.testing.assert_allclose(cross_entropy(np.zeros((3, 4)), [1, 2, 0]).item(), math.log(4), rtol=1e-14)

    def test_monotone_in_true_probability(self):
        losses = []
        for p in np.linspace(0.05, 0.95, 19):
            rest = (1 - p) / 3
            losses.append(cross_entropy_from_probs([[p, rest, rest, rest]], [0]))
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_label_range(self):
        with pytest.raises(ValidationError):
            cross_entropy_from_probs(np.full((1, 4), 0.25), [4])
        with pytest.raises(ValidationError):
            cross_entropy(np.zeros((1, 4)), [-1])


def small_model(seed=0):
    return MultimodalModel(ModelConfig(gru_hidden=3, trace_hidden=4, trace_out=3, embed_dim=5,
                                       dropout=0.0, seed=seed))


def test_projected_dimension(small_records):
    model = MultimodalModel()
    emb = model.embed(small_records[:3])
    assert all(e.shape == (3, 128) for e in emb.values())


def test_absent_modality_zero_embedding(small_records):
    model = MultimodalModel()
    rec = small_records[0].replace(absent=frozenset({"Gaze"}))
    emb = model.embed([rec, small_records[1]])
    assert np.all(emb["Gaze"].data[0] == 0)
    assert np.any(emb["Gaze"].data[1] != 0)


def test_encoder_gradients_match_fd(small_records):
    batch = [r.replace(sequences={m: s[:3] for m, s in r.sequences.items()},
                       timestamps=r.timestamps[:3]) for r in small_records[:2]]
    model = small_model(1)
    labels = [r.label for r in batch]
    params = model.named_parameters()

    def loss():
        return ad.softmax_cross_entropy(model.logits(model.embed(batch), 2), labels)

    loss().backward()
    analytic = {k: p.grad.copy() for k, p in params.items()}
    for name, p in params.items():
        if name.startswith("enc.Trace.W1"):
            # 768 x 4: check a random subset of entries against finite differences
            idx = np.random.default_rng(0).choice(p.data.size, 60, replace=False)
            flat = p.data.reshape(-1)
            num = []
            for i in idx:
                old = flat[i]
                flat[i] = old + 1e-5
                up = loss().item()
                flat[i] = old - 1e-5
                down = loss().item()
                flat[i] = old
                num.append((up - down) / 2e-5)
            assert rel_error(analytic[name].reshape(-1)[idx], num) < 1e-4, name
        else:
            num = numeric_grad(lambda: loss().item(), p.data)
            assert rel_error(analytic[name], num) < 1e-4, name


def test_checkpoint_roundtrip(tmp_path, small_records):
    model = MultimodalModel(ModelConfig(seed=3))
    model.save(tmp_path / "m")
    back = MultimodalModel.load(tmp_path / "m")
    np.testing.assert_array_equal(model.predict_proba(small_records), back.predict_proba(small_records))
