from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import prompts_from, read_corpus, synthetic_corpus, write_corpus
from .decoding import capture_activations, decode, iter_decode
from .training import masked_ce_loss, train_toy
from .transformer import FakeQuant, ModelWeights, forward, init_weights

__all__ = [
    "FakeQuant",
    "ModelWeights",
    "capture_activations",
    "decode",
    "forward",
    "init_weights",
    "iter_decode",
    "load_checkpoint",
    "masked_ce_loss",
    "prompts_from",
    "read_corpus",
    "save_checkpoint",
    "synthetic_corpus",
    "train_toy",
    "write_corpus",
]
