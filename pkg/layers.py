# layers.py

"""Small building blocks shared by the encoder and the package models."""

import torch
from torch import nn

HIDDEN_DIM = 128


def mlp(in_dim: int, out_dim: int, hidden_dim: int = HIDDEN_DIM) -> nn.Sequential:
    """One hidden ReLU layer, the MLP used throughout the models."""
    return nn.Sequential(
        nn.Linear(in_dim, hidden_dim),
        nn.ReLU(),
        nn.Linear(hidden_dim, out_dim),
    )


@torch.no_grad()
def kaiming_init(module: nn.Module) -> None:
    """Kaiming-initialise every weight matrix, zero every bias."""
    for name, param in module.named_parameters():
        if param.dim() >= 2:
            nn.init.kaiming_uniform_(param, nonlinearity="relu")
        else:
            param.zero_()
    for sub in module.modules():
        if isinstance(sub, nn.Embedding) and sub.padding_idx is not None:
            sub.weight[sub.padding_idx].zero_()


def l2_penalty(module: nn.Module) -> torch.Tensor:
    """Sum of squared trainable parameters."""
    params = [p for p in module.parameters() if p.requires_grad]
    if not params:
        return torch.zeros(())
    return sum((p * p).sum() for p in params)
