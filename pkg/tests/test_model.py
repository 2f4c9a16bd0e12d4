import numpy as np
import pytest
from conftest import gradcheck_model, model_grad_errors, random_batch, tiny_config
from hypothesis import given, settings, strategies as st

from peftlab import model as M
from peftlab.errors import ConfigError, DataError
from peftlab.model import ModelConfig, TaskBatch, build_model, count_params, encode, get_tier, predict
from peftlab.tensor import Tape, finite_diff_check


def test_same_seed_same_weights():
    cfg = tiny_config()
    a, b = build_model(cfg, 7), build_model(cfg, 7)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    c = build_model(cfg, 8)
    assert any(a.params[n].data.tobytes() != c.params[n].data.tobytes() for n in a.params)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(1, 8, 3, 16, 10, 10, 2)
    with pytest.raises(ConfigError):
        ModelConfig(1, 8, 2, 0, 10, 10, 2)
    with pytest.raises(ConfigError):
        ModelConfig(-1, 8, 2, 16, 10, 10, 2)
    with pytest.raises(ConfigError):
        ModelConfig(1, 8, 2, 16, 10, 10, 2, head_kind="pair")
    ModelConfig(0, 8, 2, 16, 10, 10, 2)


def test_config_round_trip():
    cfg = tiny_config(head_kind="token")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def _hand_count(L, d, f, V, P, C):
    embeddings = V * d + P * d
    per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * (2 * d)
    return embeddings + L * per_layer + d * C + C


def test_count_matches_hand_expansion():
    # L=2, d=8, d_ff=16, V=50, max_pos=10, 3 labels
    # 50*8 + 10*8 = 480; per layer 4*72 + 144 + 136 + 32 = 600; head 8*3 + 3 = 27
    cfg = ModelConfig(2, 8, 2, 16, 50, 10, 3)
    assert count_params(cfg)["total"] == 480 + 2 * 600 + 27 == 1707


def test_toy_count():
    # 3*2 + 2*2 = 10; layer 4*(4+2) + (8+4) + (8+2) + 8 = 54; head 2*2 + 2 = 6
    cfg = ModelConfig(1, 2, 1, 4, 3, 2, 2)
    assert count_params(cfg)["total"] == 70


def test_bert_like_total_within_two_percent():
    total = count_params(get_tier("bert-base").config(num_labels=2))["total"]
    assert abs(total - 108.31e6) / 108.31e6 <= 0.02


def test_distil_stack_is_half_of_bert():
    bert = count_params(get_tier("bert-base").config())["by_group"]
    distil = count_params(get_tier("distilbert").config())["by_group"]
    assert 2 * (distil["attention"] + distil["ffn"]) == bert["attention"] + bert["ffn"]


def test_desk_tiers_mirror_family_ratios():
    assert get_tier("desk-distil").layers * 2 == get_tier("desk-base").layers
    assert get_tier("desk-distil").model_dim == get_tier("desk-base").model_dim
    with pytest.raises(ConfigError):
        get_tier("gpt")
    with pytest.raises(ConfigError):
        get_tier("desk-tiny").config()


@settings(max_examples=40)
@given(
    L=st.integers(0, 3),
    heads=st.integers(1, 3),
    dh=st.integers(1, 4),
    f=st.integers(1, 12),
    V=st.integers(3, 30),
    P=st.integers(1, 12),
    C=st.integers(1, 5),
    kind=st.sampled_from(["sequence", "token"]),
)
def test_count_formula_equals_enumeration(L, heads, dh, f, V, P, C, kind):
    cfg = ModelConfig(L, heads * dh, heads, f, V, P, C, head_kind=kind)
    by_formula = count_params(cfg)
    by_model = count_params(build_model(cfg, 0))
    assert by_formula == by_model
    assert by_formula["total"] == _hand_count(L, heads * dh, f, V, P, C)


@given(L=st.integers(1, 6), d=st.sampled_from([4, 8, 12]), f=st.integers(1, 40))
def test_doubling_layers_doubles_layer_groups(L, d, f):
    one = count_params(ModelConfig(L, d, 2, f, 10, 10, 2))["by_group"]
    two = count_params(ModelConfig(2 * L, d, 2, f, 10, 10, 2))["by_group"]
    for g in ("attention", "ffn", "layernorm"):
        assert two[g] == 2 * one[g]
    for g in ("embeddings", "head"):
        assert two[g] == one[g]


def test_every_parameter_registered_once():
    model = build_model(tiny_config(layers=2), 0)
    names = list(model.params)
    assert len(names) == len(set(names))
    ids = [id(t) for t in model.params.values()]
    assert len(ids) == len(set(ids))


def test_padding_tail_does_not_leak():
    cfg = tiny_config(layers=2)
    model = build_model(cfg, 1)
    rng = np.random.default_rng(0)
    ids = rng.integers(3, 20, size=(1, 8))
    mask = np.array([[True] * 5 + [False] * 3])
    base = encode(model, TaskBatch(ids, mask)).data
    shuffled = ids.copy()
    shuffled[0, 5:] = ids[0, 5:][::-1] + 1
    other = encode(model, TaskBatch(shuffled, mask)).data
    assert np.max(np.abs(base[0, :5] - other[0, :5])) <= 1e-10


def test_zero_layer_single_token_is_embedding_plus_position():
    cfg = ModelConfig(0, 4, 1, 4, 10, 3, 2)
    model = build_model(cfg, 0)
    out = encode(model, TaskBatch([[6]], [[True]])).data
    expected = model.params["embed.token"].data[6] + model.params["embed.position"].data[0]
    np.testing.assert_array_equal(out[0, 0], expected)


def test_encode_is_batch_permutation_equivariant():
    cfg = tiny_config(layers=2)
    model = build_model(cfg, 2)
    batch = random_batch(cfg, np.random.default_rng(3), batch=5, seq=6)
    perm = np.array([3, 0, 4, 1, 2])
    a = encode(model, batch).data
    b = encode(model, TaskBatch(batch.ids[perm], batch.mask[perm])).data
    np.testing.assert_allclose(a[perm], b, rtol=0, atol=1e-12)


def test_mean_hidden_gradient_wrt_query_weight():
    model, batch = gradcheck_model(0)
    wq = model.params["layers.0.attn.q.weight"]
    err = finite_diff_check(lambda tape, x: tape.mean(encode(model, batch, tape)), wq)
    assert err <= 1e-5


def test_logits_shape_token_head():
    cfg = ModelConfig(1, 8, 2, 16, 30, 16, 7, head_kind="token", dropout=0.0)
    model = build_model(cfg, 0)
    batch = random_batch(cfg, np.random.default_rng(0), batch=4, seq=16)
    assert predict(model, batch).shape == (4, 16, 7)
    cfg2 = tiny_config()
    assert predict(build_model(cfg2, 0), random_batch(cfg2, np.random.default_rng(0))).shape == (3, 3)


def test_untrained_model_is_near_uniform():
    cfg = ModelConfig(2, 16, 2, 32, 50, 12, 4, dropout=0.0)
    rng = np.random.default_rng(0)
    probs = []
    for seed in range(10):
        model = build_model(cfg, seed)
        batch = random_batch(cfg, rng, batch=100, seq=12)
        logits = predict(model, batch).data
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs.append(p / p.sum(axis=1, keepdims=True))
    mean = np.concatenate(probs).mean(axis=0)
    assert np.all(np.abs(mean - 0.25) <= 0.1)


def test_all_positions_ignored_is_empty_loss_set():
    cfg = tiny_config(head_kind="token")
    model = build_model(cfg, 0)
    batch = random_batch(cfg, np.random.default_rng(0))
    batch.labels[:] = M.IGNORE_INDEX
    with pytest.raises(DataError, match="empty loss set"):
        M.loss(model, batch, Tape())


def test_batch_contract_errors():
    cfg = tiny_config()
    model = build_model(cfg, 0)
    with pytest.raises(DataError):
        encode(model, TaskBatch([[cfg.vocab_size]], [[True]]))
    with pytest.raises(DataError):
        encode(model, TaskBatch(np.zeros((1, cfg.max_positions + 1), int), np.ones((1, cfg.max_positions + 1), bool)))
    with pytest.raises(DataError):
        M.loss(model, TaskBatch([[1, 2]], [[True, True]], [[0, 1]]), Tape())


def test_dropout_active_only_with_rng():
    cfg = tiny_config(dropout=0.3)
    model = build_model(cfg, 0)
    batch = random_batch(cfg, np.random.default_rng(0))
    a = predict(model, batch).data
    b = predict(model, batch).data
    c = predict(model, batch, rng=np.random.default_rng(1)).data
    assert a.tobytes() == b.tobytes()
    assert not np.allclose(a, c)


@pytest.mark.parametrize("head_kind", ["sequence", "token"])
def test_loss_gradient_every_tensor(head_kind):
    for seed in range(3):
        model, batch = gradcheck_model(seed, head_kind)
        names = [n for n in model.params if n != "layers.0.attn.k.bias"]
        errs = model_grad_errors(model, batch, names)
        assert max(errs.values()) <= 1e-5, errs


def test_key_bias_gradient_is_structurally_zero():
    # a key bias shifts every score of a query row by the same amount, which softmax cancels
    model, batch = gradcheck_model(0)
    kb = model.params["layers.0.attn.k.bias"]
    tape = Tape()
    loss = M.loss(model, batch, tape)
    g = tape.backward(loss)[kb.uid]
    assert np.max(np.abs(g)) <= 1e-12
    eps = 1e-5
    for i in range(kb.size):
        kb.data[i] += eps
        up = M.loss(model, batch, Tape()).item()
        kb.data[i] -= 2 * eps
        down = M.loss(model, batch, Tape()).item()
        kb.data[i] += eps
        assert abs(up - down) / (2 * eps) <= 1e-9


def test_clone_is_independent():
    model = build_model(tiny_config(), 0)
    twin = model.clone()
    twin.params["head.bias"].data += 1
    assert not np.array_equal(model.params["head.bias"].data, twin.params["head.bias"].data)
