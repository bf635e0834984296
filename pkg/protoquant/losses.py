from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .diffcore import DTYPE, NORM_EPS, cosine_similarity_matrix


COMP_GRAD_MODES = ('both', 'features', 'prototypes')


@dataclass
class LossTerms:
    """The three objective terms and their weighted total (tensors, so total can be back-propagated)"""
    align: torch.Tensor
    comp: torch.Tensor
    sep: torch.Tensor
    total: torch.Tensor
    lambda1: float
    lambda2: float

    def as_dict(self):
        return {name: getattr(self, name).detach().item() for name in ('align', 'comp', 'sep', 'total')}

    def __str__(self):
        return 'total {:.5f}  align {:.5f}  comp {:.5f}  sep {:.5f}'.format(
            *(getattr(self, name).detach().item() for name in ('total', 'align', 'comp', 'sep')))


def _vectors(prototypes):
    return prototypes.vectors if hasattr(prototypes, 'vectors') else prototypes


def align_loss(features, prototypes, labels):
    """Cross-entropy over cosine similarities to the K prototypes

    -(1/N) sum_i log(exp(cos(f_i, h_{y_i})) / sum_j exp(cos(f_i, h_j)))

    :param features: torch.tensor (N, d)
        Hybrid features

    :param prototypes: PrototypeSet or torch.tensor (K, d)

    :param labels: torch.tensor (N,) of 1-based labels

    :return: torch.tensor (scalar)
    """
    vectors = _vectors(prototypes)
    if (torch.linalg.vector_norm(features, dim=1) < NORM_EPS).any():
        raise ValueError('degenerate feature')
    if labels.min() < 1 or labels.max() > vectors.shape[0]:
        raise ValueError('label out of range')
    logits = cosine_similarity_matrix(features, vectors)
    return F.cross_entropy(logits, labels.long() - 1)


def compactness_loss(h_p, hard, prototypes, grad_mode='both'):
    """||H_p - Q H_t||^2 (squared Frobenius norm); Q is treated as a constant

    :param h_p: torch.tensor (N, d)

    :param hard: torch.tensor (N, K) one-hot assignment

    :param prototypes: PrototypeSet or torch.tensor (K, d)

    :param grad_mode: str in ['both', 'features', 'prototypes'] (default = 'both')
        Which side of the difference receives gradient

    :return: torch.tensor (scalar)
    """
    assert grad_mode in COMP_GRAD_MODES
    vectors = _vectors(prototypes)
    if hard.shape != (h_p.shape[0], vectors.shape[0]) or h_p.shape[1] != vectors.shape[1]:
        raise ValueError('shape mismatch')
    if grad_mode == 'prototypes':
        h_p = h_p.detach()
    elif grad_mode == 'features':
        vectors = vectors.detach()
    return ((h_p - hard.detach() @ vectors) ** 2).sum()


def pairwise_sq_distances(vectors):
    # explicit differences keep the zero diagonal differentiable (cdist's sqrt is not at 0)
    return ((vectors.unsqueeze(1) - vectors.unsqueeze(0)) ** 2).sum(-1)


def _off_diagonal(k):
    return ~torch.eye(k, dtype=torch.bool)


def prototype_affinity(prototypes):
    """p_ij = exp(-||h_i - h_j||^2) / sum_{k != i} exp(-||h_i - h_k||^2), zero diagonal

    :return: torch.tensor (K, K)
    """
    vectors = _vectors(prototypes)
    k = vectors.shape[0]
    if k < 2:
        raise ValueError('affinity needs at least 2 prototypes')
    logits = (-pairwise_sq_distances(vectors)).masked_fill(~_off_diagonal(k), float('-inf'))
    return torch.softmax(logits, dim=1)


def kl_uniformity(P):
    """(1/K) sum_k KL(p_k || uniform over the K - 1 other prototypes)"""
    k = P.shape[0]
    p = P[_off_diagonal(k)]
    return torch.xlogy(p, p * (k - 1)).sum() / k


def separation_loss(prototypes):
    """sum over ordered pairs i != j of exp(-||h_i - h_j||^2)"""
    vectors = _vectors(prototypes)
    k = vectors.shape[0]
    if k < 2:
        raise ValueError('separation needs at least 2 prototypes')
    return torch.exp(-pairwise_sq_distances(vectors))[_off_diagonal(k)].sum()


def total_loss(align, comp, sep, lambda1=0.01, lambda2=0.01):
    """L_total = align + lambda1 * comp + lambda2 * sep

    :return: LossTerms
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError('negative loss weight')
    align, comp, sep = (torch.as_tensor(x, dtype=DTYPE) for x in (align, comp, sep))
    return LossTerms(align, comp, sep, align + lambda1 * comp + lambda2 * sep, lambda1, lambda2)
