from dataclasses import dataclass

import torch
import torch.nn.functional as F
from scipy.stats import entropy

from .diffcore import DTYPE, check_finite, cosine_similarity_matrix, softmax_rows
from .helpers import derive_seed


EPS_CLAMP = 1e-10


@dataclass
class AssignmentTensors:
    """Intermediate tensors of one quantisation pass

    S: cosine similarities (N, K); probs: softmax of S; Y: Gumbel-Softmax weights; hard: one-hot argmax of Y
    """
    S: torch.Tensor
    probs: torch.Tensor
    Y: torch.Tensor
    hard: torch.Tensor
    tau: float

    def assigned(self):
        """1-based index of the assigned prototype per row"""
        return self.hard.argmax(dim=1) + 1


class NoiseSource:
    """Counter-based uniform noise

    Draw number n uses a generator seeded with derive_seed(seed, 'gumbel/n'), so the noise of any draw depends only on
    (seed, n) and not on what else ran in the process.
    """

    def __init__(self, seed, purpose='gumbel'):
        self.seed = seed
        self.purpose = purpose
        self.counter = 0

    def uniform(self, shape):
        gen = torch.Generator()
        gen.manual_seed(derive_seed(self.seed, '{}/{}'.format(self.purpose, self.counter)))
        self.counter += 1
        return torch.clamp(torch.rand(shape, generator=gen, dtype=DTYPE), EPS_CLAMP, 1 - EPS_CLAMP)


def assignment_probs(S):
    """q_ik = softmax_k(s_ik)"""
    return softmax_rows(S, 1.0)


def _log_probs(probs):
    return torch.log(torch.clamp(probs, min=torch.finfo(DTYPE).tiny))


def gumbel_softmax(probs, tau=1.0, noise=None, straight_through=False):
    """Relaxed categorical sample y_ik = softmax_k((log q_ik - log(-log eps_ik)) / tau)

    :param probs: torch.tensor (N, K)
        Row-stochastic assignment probabilities

    :param tau: float (default = 1.0)
        Temperature, must be positive

    :param noise: NoiseSource, torch.tensor (N, K) of values in (0, 1), or None (default = None)
        None gives the deterministic evaluation mode softmax(log q / tau). Injected values are treated as constants

    :param straight_through: bool (default = False)
        If True the forward value is the hard one-hot while gradients follow the soft sample

    :return: torch.tensor (N, K)
    """
    if not tau > 0:
        raise ValueError('invalid temperature')
    check_finite(probs)
    logits = _log_probs(probs)
    if noise is not None:
        if isinstance(noise, NoiseSource):
            eps = noise.uniform(probs.shape)
        else:
            eps = torch.as_tensor(noise, dtype=DTYPE)
            if eps.shape != probs.shape:
                raise ValueError('noise shape mismatch')
            if not ((eps > 0) & (eps < 1)).all():
                raise ValueError('noise outside (0, 1)')
        eps = torch.clamp(eps, EPS_CLAMP, 1 - EPS_CLAMP)
        logits = logits - torch.log(-torch.log(eps))
    y = softmax_rows(logits, tau)
    if straight_through:
        y = (hard_assign(y) - y).detach() + y
    return y


def quantize(Y, prototypes):
    """v_i = sum_k y_ik h_k

    :param Y: torch.tensor (N, K)

    :param prototypes: PrototypeSet

    :return: torch.tensor (N, d)
    """
    if Y.shape[1] != prototypes.num_classes:
        raise ValueError('shape mismatch: {} weights for {} prototypes'.format(Y.shape[1], prototypes.num_classes))
    return Y @ prototypes.vectors


def hard_assign(Y):
    """One-hot of the row argmax (lowest index on ties); carries no gradient"""
    Y = Y.detach()
    return F.one_hot(Y.argmax(dim=1), num_classes=Y.shape[1]).to(DTYPE)


def assign(features, prototypes, tau=1.0, noise=None, straight_through=False):
    """Similarity, probabilities, Gumbel-Softmax weights and hard assignment for a feature batch

    :return: AssignmentTensors
    """
    S = cosine_similarity_matrix(features, prototypes.vectors)
    probs = assignment_probs(S)
    Y = gumbel_softmax(probs, tau, noise, straight_through)
    return AssignmentTensors(S, probs, Y, hard_assign(Y), tau)


def mean_row_entropy(Y):
    """Mean Shannon entropy (nats) of the rows of Y"""
    return float(entropy(Y.detach().cpu().numpy(), axis=1).mean())
