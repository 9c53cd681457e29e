import pytest
import torch

from dllm_quant.config import ModelConfig, reset_config
from dllm_quant.model import init_weights, synthetic_corpus, train_toy
from dllm_quant.model.transformer import ModelWeights
from dllm_quant.numerics import Rng

TOY_CONFIG = ModelConfig(
    vocab_size=16, seq_len=24, d_model=16, n_layers=2, n_heads=2, d_ff=32
)


@pytest.fixture(autouse=True, scope="session")
def single_thread():
    torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("DLLMQ_SEED", raising=False)
    monkeypatch.delenv("DLLMQ_OUTPUT_DIR", raising=False)
    monkeypatch.delenv("DLLMQ_THREADS", raising=False)
    reset_config()
    torch.set_num_threads(1)
    yield
    reset_config()
    torch.set_num_threads(1)


@pytest.fixture
def micro_config() -> ModelConfig:
    return ModelConfig(vocab_size=12, seq_len=16, d_model=8, n_layers=1, n_heads=2, d_ff=16)


@pytest.fixture
def micro_weights(micro_config) -> ModelWeights:
    return init_weights(micro_config, Rng(0))


@pytest.fixture
def toy_config() -> ModelConfig:
    return TOY_CONFIG


@pytest.fixture
def toy_weights() -> ModelWeights:
    return init_weights(TOY_CONFIG, Rng(5))


@pytest.fixture(scope="session")
def toy_corpus():
    return synthetic_corpus(Rng(3), 96, TOY_CONFIG.seq_len, TOY_CONFIG.vocab_size)


@pytest.fixture(scope="session")
def trained_toy(toy_corpus) -> ModelWeights:
    return train_toy(TOY_CONFIG, toy_corpus, epochs=60, lr=0.2, rng=Rng(1), log_every=0)
