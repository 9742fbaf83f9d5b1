from .checkpoint import Checkpoint, config_hash, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .layers import (
    LayerNorm, LstmParams, TransformerBlock, attention, dropout, embed, glorot,
    log_softmax, lstm_cell, ones, softmax, transformer_block, zeros,
)
from .losses import cross_entropy
from .optim import Adam, EarlyStopper, adam_step
from .tensor import Tensor

__all__ = [
    "Adam", "Checkpoint", "EarlyStopper", "LayerNorm", "LstmParams", "Tensor",
    "TransformerBlock", "adam_step", "attention", "config_hash", "cross_entropy",
    "dropout", "embed", "glorot", "grad_check", "load_checkpoint", "log_softmax",
    "lstm_cell", "ones", "save_checkpoint", "softmax", "transformer_block", "zeros",
]
