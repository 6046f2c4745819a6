import numpy as np
import pytest

from jtoklab.config import make_config


def tiny(**kw):
    base = dict(schema_version=1, vocab_size=8, hidden_dim=4, n_layers=2, n_heads=1, ffn_dim=4,
                seq_len=3, n_e=3, top_k=2, moe_n_experts=3, moe_top_k=2, moe_n_shared=1,
                batch_size=1, corpus_tokens=64, init_std=0.5, table_init_std=0.5)
    base.update(kw)
    return make_config(base)


def randomize_plugins(params, rng, scale=0.5):
    """Give zero-initialized scalers random values so plugin paths carry signal."""
    for k, p in params.items():
        if k.endswith("scaler"):
            p.data = rng.normal(0, scale, p.data.shape)
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
