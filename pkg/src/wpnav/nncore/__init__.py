"""Dense networks, reverse-mode gradients, Adam and checkpoints (float64 throughout)."""
from .autograd import Parameter, Tensor, as_tensor, backward, concat, minimum, no_grad, softmax, take_rows
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint
from .layers import MLP, Dense, Module, dense_forward, orthogonal
from .optim import AdamState, adam_apply, clip_grad_norm, global_grad_norm

__all__ = [
    "Parameter", "Tensor", "as_tensor", "backward", "concat", "minimum", "no_grad", "softmax",
    "take_rows", "load_checkpoint", "read_checkpoint", "save_checkpoint", "write_checkpoint",
    "MLP", "Dense", "Module", "dense_forward", "orthogonal", "AdamState", "adam_apply",
    "clip_grad_norm", "global_grad_norm",
]
