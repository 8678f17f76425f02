import json
from pathlib import Path

import numpy as np
import pytest

from blockdiff.model import ModelConfig, init_params

ORACLES = json.loads((Path(__file__).parent / "oracles" / "oracles.json").read_text())


@pytest.fixture
def oracles():
    return ORACLES


def tiny_model(seed=0, V=13, L=16, parametrization="unshifted", dtype="float64", d=16, layers=2, heads=2,
               init_std=0.3):
    cfg = ModelConfig(vocab_size=V, d_model=d, n_layers=layers, n_heads=heads, max_len=L,
                      parametrization=parametrization, dtype=dtype, init_std=init_std)
    model = init_params(cfg, seed)
    rng = np.random.default_rng([seed, 99])
    for p in model.params.values():
        p.data += (0.05 * rng.standard_normal(p.shape)).astype(p.data.dtype)
    return model
