import numpy as np
import torch
import torch.nn as nn

from .diffcore import DTYPE, softmax_rows
from .helpers import make_generator


KV_MODES = ('quantized_token', 'prototype_set')


class FusionBlock(nn.Module):
    """Single-head cross-attention from features to quantized tokens, followed by a residual FFN

    f_i = FFN(CrossAttention(h_i, kv)) + h_i. With kv_mode 'quantized_token' the only key/value is v_i; with
    'prototype_set' the keys/values are the K prototype rows.
    """

    def __init__(self, dim, kv_mode='quantized_token', seed=0, hidden_mult=4):
        """
        :param dim: int
            Feature dimension d

        :param kv_mode: str in ['quantized_token', 'prototype_set'] (default = 'quantized_token')

        :param seed: int (default = 0)

        :param hidden_mult: int (default = 4)
            FFN hidden width is hidden_mult * dim
        """
        super(FusionBlock, self).__init__()
        assert kv_mode in KV_MODES, "Unknown kv_mode {}".format(kv_mode)
        self.dim = dim
        self.kv_mode = kv_mode
        self.to_q = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.to_k = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.to_v = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.to_out = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.ffn_in = nn.Linear(dim, hidden_mult * dim, dtype=DTYPE)
        self.ffn_out = nn.Linear(hidden_mult * dim, dim, dtype=DTYPE)

        gen = make_generator(seed, 'fusion')
        with torch.no_grad():
            for lin in (self.to_q, self.to_k, self.to_v, self.to_out, self.ffn_in):
                bound = 1.0 / np.sqrt(lin.in_features)
                lin.weight.copy_((torch.rand(lin.weight.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
                if lin.bias is not None:
                    lin.bias.zero_()
            # zero output layer: the block starts as the identity on h
            self.ffn_out.weight.zero_()
            self.ffn_out.bias.zero_()
        self.last_attention = None

    def ffn(self, x):
        return self.ffn_out(torch.tanh(self.ffn_in(x)))

    def attention(self, h, v, prototypes):
        """Returns (attention output (N, d), attention weights (N, T)) with T = 1 or K tokens"""
        q = self.to_q(h)
        if self.kv_mode == 'quantized_token':
            tokens = v.unsqueeze(1)
        else:
            tokens = prototypes.vectors.unsqueeze(0).expand(h.shape[0], -1, -1)
        keys = self.to_k(tokens)
        values = self.to_v(tokens)
        scores = (keys @ q.unsqueeze(-1)).squeeze(-1) / np.sqrt(self.dim)
        weights = softmax_rows(scores, 1.0)
        out = (weights.unsqueeze(1) @ values).squeeze(1)
        return self.to_out(out), weights

    def forward(self, h, v, prototypes):
        if h.shape[1] != self.dim or v.shape != h.shape or prototypes.dim != self.dim:
            raise ValueError('dimension mismatch in fusion')
        attn, weights = self.attention(h, v, prototypes)
        self.last_attention = weights.detach()
        return self.ffn(attn) + h


def fuse(h_p, v, prototypes, block):
    """Hybrid features F = FFN(CrossAttention(h_p, v)) + h_p

    :param h_p: torch.tensor (N, d)

    :param v: torch.tensor (N, d)
        Quantized features

    :param prototypes: PrototypeSet
        Only read in 'prototype_set' kv_mode

    :param block: FusionBlock

    :return: torch.tensor (N, d)
    """
    return block(h_p, v, prototypes)
