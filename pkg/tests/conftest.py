import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from miret import tensor as T
from miret.model import ModelConfig, MultiInterestModel


@pytest.fixture
def debug_checks():
    """Per-op finiteness checks, scoped to the test that asks for them."""
    T.set_debug_checks(True)
    yield
    T.set_debug_checks(False)


TINY_CONFIG = dict(
    dim=8,
    layers=2,
    heads=2,
    interests=4,
    max_seq_len=20,
    vocab_size=30,
    tag_vocab=4,
    windows=((4, 2),),
    raw_tail=12,
    watch_bucket_count=6,
    duration_bucket_count=8,
)


def tiny_model(dtype=np.float64, seed=1, **overrides) -> MultiInterestModel:
    cfg = ModelConfig(**{**TINY_CONFIG, **overrides})
    return MultiInterestModel(cfg, seed=seed, dtype=dtype)


def random_columns(rng: np.random.Generator, n: int, vocab=30, tags=4) -> dict:
    return {
        "items": rng.integers(0, vocab, n),
        "watch": rng.uniform(0.0, 500.0, n),
        "dur": rng.uniform(5.0, 290.0, n),
        "tags": rng.integers(0, tags, n),
        "labels": rng.integers(0, 8, n),
    }
