import numpy as np
import pytest
from conftest import gradcheck_model, model_grad_errors, random_batch, tiny_config
from hypothesis import given, settings, strategies as st

from peftlab import model as M
from peftlab.errors import ConfigError, StateError
from peftlab.harness import Adam
from peftlab.model import ModelConfig, build_model, count_params, get_tier, predict
from peftlab.peft import (
    Ia3Config,
    LoraConfig,
    assert_frozen,
    count_trainable,
    ia3_param_count,
    ia3_shapes,
    inject_ia3,
    inject_lora,
    lora_param_count,
    lora_shapes,
    merge,
    set_full_finetune,
    snapshot,
)
from peftlab.tensor import Tape

BERT = get_tier("bert-base").config(num_labels=2)


def _perturb_adapter(model, rng, scale=0.3):
    for t in model.adapter.params.values():
        t.data = t.data + scale * rng.normal(size=t.shape)


def test_lora_config_validation():
    with pytest.raises(ConfigError):
        LoraConfig(rank=0)
    with pytest.raises(ConfigError):
        LoraConfig(dropout=1.0)
    with pytest.raises(ConfigError):
        LoraConfig(target_modules=("attention",))
    with pytest.raises(ConfigError):
        lora_shapes(tiny_config(), LoraConfig(rank=9))
    with pytest.raises(ConfigError):
        Ia3Config(dropout=-0.1)


def test_defaults_are_key_value_rank_eight_unit_scale():
    cfg = LoraConfig()
    assert (cfg.rank, cfg.alpha, cfg.dropout, cfg.target_modules) == (8, 8.0, 0.1, ("key", "value"))
    assert cfg.scaling == 1.0
    assert Ia3Config().dropout == 0.1


def test_toy_square_matrix_rank_two():
    cfg = ModelConfig(1, 4, 1, 8, 10, 5, 2)
    shapes = lora_shapes(cfg, LoraConfig(rank=2, target_modules=("query",)))
    assert sum(int(np.prod(s)) for s in shapes.values()) == 16


def test_bert_like_lora_count():
    lcfg = LoraConfig(rank=8, target_modules=("key", "value"))
    enumerated = sum(int(np.prod(s)) for s in lora_shapes(BERT, lcfg).values())
    assert enumerated == lora_param_count(BERT, lcfg) == 2 * 12 * 8 * 2 * 768 == 294_912


def test_bert_like_ia3_count():
    enumerated = sum(int(np.prod(s)) for s in ia3_shapes(BERT, Ia3Config()).values())
    assert enumerated == ia3_param_count(BERT, Ia3Config()) == 12 * (768 + 768 + 3072) == 55_296


def test_bert_like_trainable_totals_with_head():
    head = count_params(BERT)["by_group"]["head"]
    assert head == 768 * 2 + 2
    assert lora_param_count(BERT, LoraConfig()) + head == 296_450
    assert ia3_param_count(BERT, Ia3Config()) + head == 56_834


@settings(max_examples=25)
@given(
    L=st.integers(1, 3),
    r=st.integers(1, 4),
    targets=st.sets(st.sampled_from(["query", "key", "value", "ffn"]), min_size=1),
    kind=st.sampled_from(["sequence", "token"]),
)
def test_trainable_count_algebra(L, r, targets, kind):
    cfg = ModelConfig(L, 8, 2, 12, 15, 6, 3, head_kind=kind)
    head = 8 * 3 + 3
    total = count_params(cfg)["total"]
    lcfg = LoraConfig(rank=r, target_modules=tuple(targets))
    m, _ = inject_lora(build_model(cfg, 0), lcfg)
    c = count_trainable(m)
    assert c["trainable"] == lora_param_count(cfg, lcfg) + head
    assert c["frozen"] == total - head
    assert c["total"] == total + lora_param_count(cfg, lcfg)
    m, _ = inject_ia3(build_model(cfg, 0))
    assert count_trainable(m)["trainable"] == L * (8 + 8 + 12) + head


def test_full_finetune_all_trainable():
    m = set_full_finetune(build_model(tiny_config(), 0))
    c = count_trainable(m)
    assert c["trainable"] == c["total"] and c["frozen"] == 0


@given(st.sets(st.sampled_from(["query", "key", "value", "ffn"]), min_size=1, max_size=3))
def test_lora_count_monotone(targets):
    cfg = ModelConfig(2, 16, 2, 32, 10, 10, 2)
    counts = [lora_param_count(cfg, LoraConfig(rank=r, target_modules=tuple(targets))) for r in range(1, 9)]
    assert all(a < b for a, b in zip(counts, counts[1:]))
    extra = next(t for t in ["query", "key", "value", "ffn"] if t not in targets)
    more = tuple(targets) + (extra,)
    assert lora_param_count(cfg, LoraConfig(rank=2, target_modules=more)) > lora_param_count(cfg, LoraConfig(rank=2, target_modules=tuple(targets)))


def test_injection_init():
    m, state = inject_lora(build_model(tiny_config(), 0), LoraConfig(rank=2), seed=3)
    for name, t in state.params.items():
        if name.endswith("lora_B"):
            assert not t.data.any()
        else:
            assert 0 < t.data.std() and np.abs(t.data).max() <= 2 * 0.02
    m, state = inject_ia3(build_model(tiny_config(), 0))
    assert all((t.data == 1).all() for t in state.params.values())


def test_double_injection_and_merge_rejected():
    m, _ = inject_lora(build_model(tiny_config(), 0), LoraConfig(rank=2))
    with pytest.raises(StateError):
        inject_ia3(m)
    merge(m)
    with pytest.raises(StateError):
        merge(m)
    with pytest.raises(StateError):
        set_full_finetune(inject_ia3(build_model(tiny_config(), 0))[0])


def test_only_head_stays_trainable():
    m, _ = inject_lora(build_model(tiny_config(), 0), LoraConfig(rank=2))
    assert {n for n, t in m.params.items() if t.requires_grad} == {"head.weight", "head.bias"}


@settings(max_examples=25)
@given(
    seed=st.integers(0, 10_000),
    L=st.integers(1, 2),
    heads=st.sampled_from([1, 2, 4]),
    kind=st.sampled_from(["sequence", "token"]),
    targets=st.sets(st.sampled_from(["query", "key", "value", "ffn"]), min_size=1),
)
def test_injected_models_reproduce_base_logits(seed, L, heads, kind, targets):
    cfg = ModelConfig(L, 8, heads, 12, 20, 8, 3, head_kind=kind, dropout=0.2)
    batch = random_batch(cfg, np.random.default_rng(seed), batch=3, seq=7)
    base = predict(build_model(cfg, seed), batch).data
    lora, _ = inject_lora(build_model(cfg, seed), LoraConfig(rank=2, target_modules=tuple(targets)), seed=seed)
    ia3, _ = inject_ia3(build_model(cfg, seed))
    assert predict(lora, batch).data.tobytes() == base.tobytes()
    assert predict(ia3, batch).data.tobytes() == base.tobytes()


@pytest.mark.parametrize("kind", ["lora", "ia3"])
def test_merge_of_untouched_adapter_is_bitwise_base(kind):
    cfg = tiny_config(layers=2)
    base = build_model(cfg, 0)
    m = base.clone()
    if kind == "lora":
        inject_lora(m, LoraConfig(rank=2, target_modules=("query", "key", "value", "ffn")))
    else:
        inject_ia3(m)
    merge(m)
    for n in base.params:
        assert m.params[n].data.tobytes() == base.params[n].data.tobytes(), n
    assert m.adapter is None and count_trainable(m)["frozen"] == 0


@settings(max_examples=20)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["lora", "ia3"]), head=st.sampled_from(["sequence", "token"]))
def test_merge_equivalence_random_adapters(seed, kind, head):
    rng = np.random.default_rng(seed)
    cfg = tiny_config(layers=2, head_kind=head)
    m = build_model(cfg, seed)
    if kind == "lora":
        inject_lora(m, LoraConfig(rank=3, alpha=5.0, target_modules=("query", "key", "value", "ffn")), seed)
    else:
        inject_ia3(m)
    _perturb_adapter(m, rng)
    batches = [random_batch(cfg, rng) for _ in range(5)]
    before = [predict(m, b).data for b in batches]
    merge(m)
    for b, ref in zip(batches, before):
        assert np.max(np.abs(predict(m, b).data - ref)) <= 1e-9


def test_ia3_folding_is_exact_per_element():
    rng = np.random.default_rng(0)
    w, x, l = rng.normal(size=(6, 5)), rng.normal(size=(4, 6)), rng.normal(size=5)
    assert np.max(np.abs(x @ (w * l) - (x @ w) * l)) <= 1e-12


def test_lora_merge_matches_explicit_delta():
    cfg = tiny_config()
    m, state = inject_lora(build_model(cfg, 0), LoraConfig(rank=2, alpha=6.0, target_modules=("value",)))
    _perturb_adapter(m, np.random.default_rng(1))
    a = state.params["layers.0.attn.v.lora_A"].data
    b = state.params["layers.0.attn.v.lora_B"].data
    w0 = m.params["layers.0.attn.v.weight"].data.copy()
    merge(m)
    np.testing.assert_allclose(m.params["layers.0.attn.v.weight"].data, w0 + 3.0 * (b @ a).T, atol=1e-15)


def test_ia3_ffn_vector_gradient():
    model, batch = gradcheck_model(0)
    inject_ia3(model, Ia3Config(dropout=0.0))
    _perturb_adapter(model, np.random.default_rng(2), 0.2)
    names = list(model.adapter.params) + ["head.weight"]
    errs = model_grad_errors(model, batch, names)
    assert max(errs.values()) <= 1e-5, errs


def test_lora_adapter_gradients():
    model, batch = gradcheck_model(1)
    inject_lora(model, LoraConfig(rank=2, alpha=3.0, dropout=0.0, target_modules=("query", "value", "ffn")), seed=1)
    _perturb_adapter(model, np.random.default_rng(3), 0.5)
    errs = model_grad_errors(model, batch, list(model.adapter.params))
    assert max(errs.values()) <= 1e-5, errs


def test_lora_dropout_only_on_adapter_path():
    cfg = tiny_config(dropout=0.0)
    m, _ = inject_lora(build_model(cfg, 0), LoraConfig(rank=2, dropout=0.5))
    batch = random_batch(cfg, np.random.default_rng(0))
    # B = 0, so adapter-path dropout cannot change the output
    a = predict(m, batch).data
    b = predict(m, batch, rng=np.random.default_rng(4)).data
    assert a.tobytes() == b.tobytes()


def _train_steps(model, cfg, steps, seed=0):
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), 1e-2)
    for _ in range(steps):
        tape = Tape()
        loss = M.loss(model, random_batch(cfg, rng), tape, rng)
        opt.step(tape.backward(loss))


@pytest.mark.parametrize("kind", ["lora", "ia3"])
def test_training_leaves_base_bitwise_frozen(kind):
    cfg = tiny_config(dropout=0.1)
    m = build_model(cfg, 0)
    inject_lora(m, LoraConfig(rank=2)) if kind == "lora" else inject_ia3(m)
    snap = snapshot(m)
    assert len(snap) == len(m.params) - 2
    adapter_before = {n: t.data.copy() for n, t in m.adapter.params.items()}
    _train_steps(m, cfg, 100 if kind == "lora" else 30)
    report = assert_frozen(m, snap)
    assert report.ok and report.checked == len(snap)
    assert all(not np.array_equal(t.data, adapter_before[n]) for n, t in m.adapter.params.items())


def test_full_finetune_moves_every_base_tensor():
    cfg = tiny_config()
    m = set_full_finetune(build_model(cfg, 0))
    snap = snapshot(m, names=list(m.params))
    _train_steps(m, cfg, 1)
    report = assert_frozen(m, snap)
    assert sorted(report.violations) == sorted(m.params)


def test_fault_injection_reports_exactly_the_unfrozen_tensor():
    cfg = tiny_config()
    m, _ = inject_lora(build_model(cfg, 0), LoraConfig(rank=2))
    snap = snapshot(m)
    m.params["layers.0.ffn.w1.weight"].requires_grad = True  # simulated optimizer bug
    _train_steps(m, cfg, 3)
    assert assert_frozen(m, snap).violations == ["layers.0.ffn.w1.weight"]
