"""Semi-supervised paraphrase generation with a shared transformer, dual
directional likelihood and a latent-sequence ELBO over unlabelled sources."""
from .data import BOS, EOS, PAD, UNK, Vocab, build_vocab, encode_text, decode_ids
from .model import ModelConfig, SharedSeq2Seq
from .trainer import TrainConfig, krl_finetune, krl_pretrain

__all__ = ["BOS", "EOS", "PAD", "UNK", "Vocab", "build_vocab", "encode_text", "decode_ids",
           "ModelConfig", "SharedSeq2Seq", "TrainConfig", "krl_pretrain", "krl_finetune"]
__version__ = "0.1.0"
