import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from scipy.optimize import linear_sum_assignment

from .diffcore import DTYPE, NORM_EPS, l2_normalize_rows
from .helpers import make_generator


logger = logging.getLogger(__name__)

STRATEGIES = ('prompted', 'centroid', 'codebook')


@dataclass
class PrototypeSet:
    """K class prototypes, one unit-norm row per class

    :param vectors: torch.tensor (K, d)
        May carry autograd history back to prompts or codebook rows

    :param strategy: str in ['prompted', 'centroid', 'codebook']
    """
    vectors: torch.Tensor
    strategy: str

    def __post_init__(self):
        assert self.strategy in STRATEGIES, "Unknown prototype strategy {}".format(self.strategy)

    @property
    def num_classes(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def detach(self):
        return PrototypeSet(self.vectors.detach().clone(), self.strategy)

    def is_distinct(self, tol=1e-12):
        """True when no two rows coincide within tol (max-abs difference)"""
        v = self.vectors.detach()
        diff = (v.unsqueeze(1) - v.unsqueeze(0)).abs().amax(dim=-1)
        diff.fill_diagonal_(float('inf'))
        return bool((diff > tol).all())


def _random_unit_rows(rows, cols, gen):
    x = torch.randn((rows, cols), generator=gen, dtype=DTYPE)
    return l2_normalize_rows(x)


class PromptBank(nn.Module):
    """m learnable prompt vectors shared across classes plus K frozen class tokens"""

    def __init__(self, num_classes, m, token_dim, seed=0, trainable=True, init_std=0.02):
        """
        :param num_classes: int
            K, the number of classes (one class token each)

        :param m: int
            Number of prompt vectors. m = 0 gives class-token-only prototypes

        :param token_dim: int
            Dimension of each token

        :param seed: int (default = 0)

        :param trainable: bool (default = True)
            If False the prompts stay at their seeded initialisation (fixed-template mode)

        :param init_std: float (default = 0.02)
            Standard deviation of the zero-mean Gaussian prompt initialisation
        """
        super(PromptBank, self).__init__()
        assert m >= 0, "Prompt count must be non-negative"
        assert num_classes >= 1
        self.num_classes = num_classes
        self.m = m
        self.token_dim = token_dim

        class_tokens = _random_unit_rows(num_classes, token_dim, make_generator(seed, 'class_tokens'))
        self.register_buffer('class_tokens', class_tokens)
        if not PrototypeSet(class_tokens, 'prompted').is_distinct():
            raise ValueError('class tokens are not distinct')

        prompts = torch.randn((m, token_dim), generator=make_generator(seed, 'prompts'), dtype=DTYPE) * init_std
        self.prompts = nn.Parameter(prompts, requires_grad=trainable)

    def sequences(self):
        """Returns the K flattened token sequences [u_1, ..., u_m, c_k], shape (K, (m + 1) * token_dim)"""
        k = self.num_classes
        shared = self.prompts.unsqueeze(0).expand(k, self.m, self.token_dim)
        seq = torch.cat([shared, self.class_tokens.unsqueeze(1)], dim=1)
        return seq.reshape(k, (self.m + 1) * self.token_dim)


class EncoderSurrogate(nn.Module):
    """Frozen two-layer tanh network standing in for a pretrained text encoder"""

    def __init__(self, m, token_dim, out_dim, seed=0, hidden_mult=4, frozen=True):
        """
        :param m: int
            Prompt count of the banks this surrogate will encode

        :param token_dim: int

        :param out_dim: int
            Must match the feature dimension d

        :param seed: int (default = 0)

        :param hidden_mult: int (default = 4)
            Hidden width is hidden_mult * out_dim

        :param frozen: bool (default = True)
            If False the weights are registered as trainable (only used for the 'all' fine-tuning scope)
        """
        super(EncoderSurrogate, self).__init__()
        self.in_dim = (m + 1) * token_dim
        self.out_dim = out_dim
        hidden = hidden_mult * out_dim
        gen = make_generator(seed, 'surrogate')
        self.lin1 = nn.Linear(self.in_dim, hidden, dtype=DTYPE)
        self.lin2 = nn.Linear(hidden, out_dim, dtype=DTYPE)
        with torch.no_grad():
            for lin in (self.lin1, self.lin2):
                bound = 1.0 / np.sqrt(lin.in_features)
                lin.weight.copy_((torch.rand(lin.weight.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
                lin.bias.copy_((torch.rand(lin.bias.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        self.requires_grad_(not frozen)

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError('dimension mismatch: surrogate expects {} inputs, got {}'.format(self.in_dim, x.shape[-1]))
        return self.lin2(torch.tanh(self.lin1(x)))


def encode_prototypes(bank, surrogate):
    """Builds prompted prototypes h_k = normalize(surrogate([u_1, ..., u_m, c_k]))

    :param bank: PromptBank

    :param surrogate: EncoderSurrogate

    :return: PrototypeSet
    """
    return PrototypeSet(l2_normalize_rows(surrogate(bank.sequences())), 'prompted')


class Codebook(nn.Module):
    """Free trainable prototype rows, renormalised on every read"""

    def __init__(self, num_classes, dim, seed=0):
        super(Codebook, self).__init__()
        assert num_classes >= 2 and dim >= 2, "Codebook needs K >= 2 and d >= 2"
        rows = _random_unit_rows(num_classes, dim, make_generator(seed, 'codebook'))
        self.weight = nn.Parameter(rows)

    def forward(self):
        return PrototypeSet(l2_normalize_rows(self.weight), 'codebook')


def codebook_prototypes(num_classes, dim, seed=0):
    """Seeded normal rows, normalised; gradients flow back to the codebook parameter

    :return: PrototypeSet
    """
    return Codebook(num_classes, dim, seed)()


def _nearest(points, centroids):
    # argmin returns the first minimal index, so ties go to the lowest centroid index
    sq = ((points.unsqueeze(1) - centroids.unsqueeze(0)) ** 2).sum(-1)
    return sq.argmin(dim=1), sq


def lloyd_kmeans(points, init, iterations):
    """Lloyd's k-means from given initial centroids

    :param points: torch.tensor (N, d)

    :param init: torch.tensor (k, d)

    :param iterations: int
        Maximum number of assignment/update rounds; stops early once assignments are stable

    :return: 2-tuple (centroids (k, d), assignment (N,) of 0-based cluster indices)
    """
    centroids = init.clone()
    k = centroids.shape[0]
    assignment, _ = _nearest(points, centroids)
    for _ in range(iterations):
        for j in range(k):
            members = assignment == j
            if members.any():
                centroids[j] = points[members].mean(dim=0)
            else:
                # reseed from the point farthest from its current centroid
                _, sq = _nearest(points, centroids)
                own = sq.gather(1, assignment.unsqueeze(1)).squeeze(1)
                far = int(own.argmax())
                centroids[j] = points[far]
                assignment[far] = j
        new_assignment, _ = _nearest(points, centroids)
        if torch.equal(new_assignment, assignment):
            break
        assignment = new_assignment
    return centroids, assignment


def class_means(features, labels, num_classes):
    """Per-class arithmetic means; labels are 1-based"""
    means = torch.zeros((num_classes, features.shape[1]), dtype=DTYPE)
    for k in range(num_classes):
        members = labels == k + 1
        if not members.any():
            raise ValueError('empty class')
        means[k] = features[members].mean(dim=0)
    return means


def centroid_prototypes(features, labels, num_classes=None, iterations=0):
    """Class-mean or k-means prototypes computed from labelled features

    :param features: torch.tensor (N, d)

    :param labels: torch.tensor (N,) of 1-based class labels

    :param num_classes: int (default = None)
        Defaults to the largest label

    :param iterations: int (default = 0)
        0 gives normalised class means. Otherwise Lloyd's k-means is seeded at the class means, each cluster is
        matched to the class most represented in it (one-to-one, maximising agreement), then rows are normalised

    :return: PrototypeSet
    """
    features = features.detach().to(DTYPE)
    if num_classes is None:
        num_classes = int(labels.max())
    centroids = class_means(features, labels, num_classes)
    if iterations > 0:
        clusters, assignment = lloyd_kmeans(features, centroids, iterations)
        counts = np.zeros((num_classes, num_classes))
        for c, y in zip(assignment.tolist(), labels.tolist()):
            counts[c, y - 1] += 1
        rows, cols = linear_sum_assignment(counts, maximize=True)
        centroids = torch.empty_like(clusters)
        centroids[torch.as_tensor(cols)] = clusters[torch.as_tensor(rows)]
        logger.debug('k-means relabelling: %s', dict(zip(rows.tolist(), cols.tolist())))
    norms = torch.linalg.vector_norm(centroids, dim=1)
    if (norms < NORM_EPS).any():
        raise ValueError('degenerate centroid')
    return PrototypeSet(centroids / norms.unsqueeze(1), 'centroid')
