import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from peftlab.data import encode_dataset, gen_ner_task, gen_sequence_task
from peftlab.model import ModelConfig, TaskBatch
from peftlab.tensor import Tensor, dropout_mask

settings.register_profile("peftlab", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("peftlab")


def tiny_config(**kw):
    base = dict(layers=1, model_dim=8, heads=2, ffn_dim=16, vocab_size=20, max_positions=10, num_labels=3, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(config, rng, batch=3, seq=6, pad=True):
    ids = rng.integers(0, config.vocab_size, size=(batch, seq))
    lengths = rng.integers(1, seq + 1, size=batch) if pad else np.full(batch, seq)
    lengths[0] = seq
    mask = np.arange(seq)[None, :] < lengths[:, None]
    ids = np.where(mask, ids, 0)
    if config.head_kind == "sequence":
        labels = rng.integers(0, config.num_labels, size=batch)
    else:
        labels = np.where(mask, rng.integers(0, config.num_labels, size=(batch, seq)), -100)
    return TaskBatch(ids, mask, labels)


@pytest.fixture(scope="session")
def seq_task():
    return gen_sequence_task(0, 300, num_classes=2, vocab_size=30, seq_len=10, noise=0.1), gen_sequence_task(1, 120, num_classes=2, vocab_size=30, seq_len=10, noise=0.1)


@pytest.fixture(scope="session")
def ner_task():
    return gen_ner_task(0, 150, entity_types=2, seq_len=10), gen_ner_task(1, 60, entity_types=2, seq_len=10)


def model_config_for(ds, **kw):
    base = dict(layers=1, model_dim=16, heads=2, ffn_dim=32, vocab_size=len(ds.vocab), max_positions=ds.max_len + 2, num_labels=ds.num_labels, head_kind=ds.kind)
    base.update(kw)
    return ModelConfig(**base)


def batch_of(ds, n=None, width=None):
    enc = encode_dataset(ds, width)
    return enc.batch(np.arange(n if n is not None else len(enc)))


def gradcheck_model(seed, head_kind="sequence"):
    """A 1-layer encoder with O(1) weights so every gradient is well above FD noise."""
    from peftlab.model import build_model

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(1, 4, 2, 8, 7, 5, 3, head_kind=head_kind, dropout=0.0, init_std=0.5)
    model = build_model(cfg, seed)
    for t in model.params.values():
        t.data += 0.3 * rng.normal(size=t.shape)
    ids = rng.integers(0, 7, size=(2, 4))
    mask = np.ones((2, 4), bool)
    mask[1, 3] = False
    labels = rng.integers(0, 3, size=2 if head_kind == "sequence" else (2, 4))
    return model, TaskBatch(ids, mask, labels)


def model_grad_errors(model, batch, names=None):
    from peftlab import model as M
    from peftlab.tensor import finite_diff_check

    params = model.parameters()
    names = names or list(params)
    return {n: finite_diff_check(lambda tape, x: M.loss(model, batch, tape), params[n]) for n in names}


def primitive_losses(rng, n, m):
    """One scalar loss per primitive; each routes the probed input through that primitive."""
    w = Tensor(rng.normal(size=(m, 3)))
    vec = Tensor(rng.normal(size=m))
    ids = rng.integers(0, n, size=(2, 3))
    labels = rng.integers(0, m, size=n)
    labels[0] = -100
    mask = dropout_mask(np.random.default_rng(0), (n, m), 0.3)

    def weighted(t, y):
        return t.sum(t.mul(y, Tensor(np.cos(np.arange(y.size)).reshape(y.shape))))

    return {
        "matmul": lambda t, x: weighted(t, t.matmul(x, w)),
        "add": lambda t, x: weighted(t, t.add(t.mul(x, x), vec)),
        "elementwise_mul": lambda t, x: weighted(t, t.mul(x, t.scale(x, 0.5))),
        "elementwise_mul_vec": lambda t, x: weighted(t, t.mul(x, vec)),
        "softmax_lastdim": lambda t, x: weighted(t, t.softmax(x)),
        "layernorm": lambda t, x: weighted(t, t.layernorm(x, Tensor(1 + vec.data), Tensor(vec.data), eps=1e-5)),
        "gelu": lambda t, x: weighted(t, t.gelu(x)),
        "embedding_lookup": lambda t, x: weighted(t, t.embedding(x, ids)),
        "dropout": lambda t, x: weighted(t, t.forward("dropout", x, mask=mask)),
        "cross_entropy": lambda t, x: t.cross_entropy(x, labels),
        "transpose": lambda t, x: weighted(t, t.transpose(x)),
        "scale": lambda t, x: weighted(t, t.scale(x, -1.7)),
        "reshape": lambda t, x: weighted(t, t.reshape(x, (m, n))),
        "sum": lambda t, x: t.mul(t.sum(x), t.sum(x)),
    }


def primitive_input(rng, n, m):
    return Tensor(rng.normal(size=(n, m)))
