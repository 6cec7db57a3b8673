import math

import numpy as np
import pytest

from anchornet.autodiff import Param, Tensor, grad_check
from anchornet.errors import InvalidArgument, ParseError
from anchornet.model import (AnchorNetT, ModelConfig, attention_branch, branch_geometry, class_activation_map,
                             total_loss)
from anchornet.rf import output_size


def toy_config(**kw):
    base = dict(vocab_size=15, embed_dim=4, seq_len=11, head_channels=(5, 6), branch_kernels=(3, 5, 7),
                branch_channels=7, attention_channels=4, num_classes=3)
    base.update(kw)
    return ModelConfig(**base)


def jitter(model, rng, scale=0.3):
    for p in model.parameters():
        p.data = p.data + rng.normal(0.0, scale, p.data.shape)
    model.params["embed"].data[model.config.pad_index] = 0.0
    return model


def softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def reference_forward(params, config, tokens):
    """Straight-line forward for one sequence, loops instead of matrix ops."""
    P = {k: p.data for k, p in params.items()}
    act = {"relu": lambda v: np.maximum(v, 0.0), "tanh": np.tanh, "identity": lambda v: v}[config.nonlinearity]

    def conv(x, w, b):
        k = w.shape[0]
        return np.array([b + sum(x[t + d] @ w[d] for d in range(k)) for t in range(len(x) - k + 1)])

    h = P["embed"][tokens]
    for i in range(len(config.head_channels)):
        h = act(conv(h, P[f"head{i}.w"], P[f"head{i}.b"]))
    out = []
    for k in config.branch_kernels:
        z = act(conv(h, P[f"b{k}.conv.w"], P[f"b{k}.conv.b"]))
        raw = conv(z, P[f"b{k}.cls.w"], P[f"b{k}.cls.b"])
        X = act(conv(z, P[f"b{k}.att.w"], P[f"b{k}.att.b"]))
        g = np.array([X[t] @ P[f"b{k}.gate.w"][0, :, 0] + P[f"b{k}.gate.b"][0] for t in range(len(X))])
        G = softmax(g)
        C = softmax(np.array([sum(X[t, c] * G[t] for t in range(len(X))) for c in range(X.shape[1])]))
        S = softmax(np.array([sum(X[t, c] * C[c] for c in range(X.shape[1])) for t in range(len(X))]))
        F = raw * S[:, None]
        probs = softmax(F.mean(axis=0))
        pooled = sum(X[t] * S[t] for t in range(len(X)))
        aux = softmax(pooled @ P[f"b{k}.aux.w"] + P[f"b{k}.aux.b"])
        out.append((F, S, C, probs, aux))
    return out


def test_branch_lengths_at_59():
    model = AnchorNetT(ModelConfig(vocab_size=20))
    out = model.forward(np.full(59, 2))
    assert [b.class_map.shape for b in out.branches] == [(57, 2), (55, 2), (53, 2)]
    for b, k in zip(out.branches, (3, 5, 7)):
        assert (1, b.class_map.shape[0]) == output_size((1, 59), model.config.branch_layers(k))
        assert branch_geometry(model.config, k).out_size == (1, b.class_map.shape[0])


def test_zero_class_layers_give_uniform_probs():
    model = AnchorNetT(ModelConfig(vocab_size=20))
    for k in (3, 5, 7):
        for name in (f"b{k}.cls.w", f"b{k}.cls.b", f"b{k}.aux.w", f"b{k}.aux.b"):
            model.params[name].data[:] = 0.0
    out = model.forward(np.arange(59) % 20)
    for b in out.branches:
        assert np.array_equal(b.class_probs.data, [0.5, 0.5])
        assert np.array_equal(b.aux_probs.data, [0.5, 0.5])


@pytest.mark.parametrize("nl", ["relu", "tanh"])
def test_forward_matches_straight_line_reference(nl, rng):
    config = toy_config(nonlinearity=nl)
    for trial in range(5):
        model = jitter(AnchorNetT(config, seed=trial), rng)
        tokens = rng.integers(config.vocab_size, size=config.seq_len)
        out = model.forward(tokens)
        for b, (F, S, C, probs, aux) in zip(out.branches, reference_forward(model.params, config, tokens)):
            for got, want in ((b.class_map, F), (b.spatial_attention, S), (b.channel_attention, C),
                              (b.class_probs, probs), (b.aux_probs, aux)):
                assert np.max(np.abs(got.data - want)) <= 1e-12


def test_batched_forward_equals_single(rng):
    config = toy_config()
    model = jitter(AnchorNetT(config), rng)
    tokens = rng.integers(config.vocab_size, size=(4, config.seq_len))
    batched = model.forward(tokens)
    for i in range(4):
        single = model.forward(tokens[i])
        for bb, sb in zip(batched.branches, single.branches):
            assert np.allclose(bb.class_map.data[i], sb.class_map.data, atol=1e-13)


def test_attention_examples():
    L, C = 5, 3
    att = attention_branch(Tensor(np.full((L, C), 0.7)), Tensor(np.ones((1, C, 1))), Tensor([0.0]))
    assert np.allclose(att.spatial_weights.data, 1 / L) and np.allclose(att.spatial_attention.data, 1 / L)
    X = Tensor([[0.0], [math.log(3)]])
    att = attention_branch(X, Tensor(np.ones((1, 1, 1))), Tensor([0.0]))
    assert np.allclose(att.spatial_weights.data, [0.25, 0.75])
    assert np.allclose(att.channel_attention.data, [1.0])
    assert np.allclose(att.spatial_attention.data, [0.25, 0.75])
    X = np.zeros((6, 4))
    X[2] += 50.0
    att = attention_branch(Tensor(X), Tensor(np.zeros((1, 4, 1))), Tensor([0.0]))
    assert att.spatial_attention.data[2] > 1 - 1e-9


def test_normalizations_hold(rng):
    config = toy_config()
    model = jitter(AnchorNetT(config), rng, scale=1.0)
    out = model.forward(rng.integers(config.vocab_size, size=(8, config.seq_len)))
    for b in out.branches:
        a = b.attention
        for t in (a.spatial_weights, a.channel_attention, a.spatial_attention, b.class_probs, b.aux_probs):
            assert np.allclose(t.data.sum(axis=-1), 1.0, atol=1e-9)


def test_permuting_positions_keeps_prediction(rng):
    from anchornet import autodiff as ad
    config = toy_config()
    model = jitter(AnchorNetT(config), rng)
    out = model.forward(rng.integers(config.vocab_size, size=config.seq_len))
    for b in out.branches:
        F = b.class_map.data
        perm = rng.permutation(F.shape[0])
        p = ad.softmax(ad.spatial_mean(Tensor(F[perm]))).data
        assert np.argmax(p) == np.argmax(b.class_probs.data)
        assert np.allclose(p, b.class_probs.data, atol=1e-15)


def test_total_loss_examples(rng):
    config = toy_config(num_classes=2)
    model = AnchorNetT(config)
    for k in config.branch_kernels:
        for name in (f"b{k}.cls.w", f"b{k}.cls.b", f"b{k}.aux.w", f"b{k}.aux.b"):
            model.params[name].data[:] = 0.0
    tokens = rng.integers(config.vocab_size, size=(3, config.seq_len))
    out = model.forward(tokens)
    assert total_loss(out, [0, 1, 0], config).item() == pytest.approx(6 * math.log(2))
    no_aux = ModelConfig(**{**config.__dict__, "aux_loss_weight": 0.0})
    assert total_loss(out, [0, 1, 0], no_aux).item() == pytest.approx(3 * math.log(2))
    with pytest.raises(InvalidArgument):
        total_loss(out, [0, 2, 0], config)


def test_total_loss_hand_sum(rng):
    config = toy_config(aux_loss_weight=0.4)
    model = jitter(AnchorNetT(config), rng)
    tokens = rng.integers(config.vocab_size, size=(2, config.seq_len))
    labels = np.array([2, 0])
    out = model.forward(tokens)
    want = 0.0
    for b in out.branches:
        for n, y in enumerate(labels):
            want += -math.log(b.class_probs.data[n, y]) / 2 + 0.4 * -math.log(b.aux_probs.data[n, y]) / 2
    assert total_loss(out, labels, config).item() == pytest.approx(want, rel=1e-12)


def test_total_loss_gradient(rng):
    config = toy_config(seq_len=9, branch_kernels=(3, 5))
    model = jitter(AnchorNetT(config), rng)
    tokens = rng.integers(2, config.vocab_size, size=(2, config.seq_len))
    labels = rng.integers(config.num_classes, size=2)
    params = [p for name, p in model.params.items() if name != "embed"]
    assert grad_check(lambda: model.loss(tokens, labels), params) < 1e-4


def test_token_checks():
    model = AnchorNetT(toy_config())
    with pytest.raises(InvalidArgument):
        model.forward(np.full(11, 15))
    with pytest.raises(InvalidArgument):
        model.forward(np.zeros(10, dtype=int))


def test_config_validation_and_text():
    with pytest.raises(InvalidArgument):
        toy_config(branch_kernels=(3, 4))
    with pytest.raises(InvalidArgument):
        toy_config(branch_kernels=(5, 3))
    with pytest.raises(InvalidArgument):
        toy_config(nonlinearity="swish")
    config = toy_config(aux_loss_weight=0.1 + 0.2)
    assert ModelConfig.from_text(config.to_text()) == config
    assert ModelConfig.from_text(config.to_text(), vocab_size=99).vocab_size == 99
    with pytest.raises(ParseError):
        ModelConfig.from_text(config.to_text().replace("anchornet-t", "other"))


def test_pad_row_starts_at_zero():
    model = AnchorNetT(toy_config())
    assert np.all(model.params["embed"].data[1] == 0)
    assert isinstance(model.params["embed"], Param)


def test_class_activation_map(rng):
    config = toy_config(num_classes=2)
    model = jitter(AnchorNetT(config), rng)
    out = model.forward(rng.integers(config.vocab_size, size=(2, config.seq_len)))
    b = out.branch(5)
    hm = class_activation_map(b, 0, config.seq_len, example=1)
    assert np.array_equal(hm.values, b.class_map.data[1][:, 0])
    assert hm.geometry.rf == (1, 5) and hm.geometry.jump == (1, 1) and hm.branch == 5
    with pytest.raises(InvalidArgument):
        class_activation_map(b, 2, config.seq_len, example=0)
    with pytest.raises(InvalidArgument):
        class_activation_map(b, 0, config.seq_len)
