import logging
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
from scipy.special import betainc

from .diffcore import DTYPE, l2_normalize_rows
from .helpers import atomic_write, make_generator
from .losses import separation_loss


logger = logging.getLogger(__name__)

MAGIC = b'PCQE'
FORMAT_VERSION = 1
HEADER = struct.Struct('<4sHIIB')


class EmbeddingFileError(ValueError):
    pass


class BadMagicError(EmbeddingFileError):
    pass


class VersionMismatchError(EmbeddingFileError):
    pass


class TruncatedPayloadError(EmbeddingFileError):
    pass


class LabelRangeError(EmbeddingFileError):
    pass


class InfeasibleSeparationError(ValueError):
    pass


@dataclass
class DatasetSpec:
    """Parameters of a synthetic labelled embedding set on the unit sphere

    intra_spread is the standard deviation (radians) of each sample's angle to its class mean; inter_separation is the
    minimum pairwise angle (radians) between class means.
    """
    num_classes: int = 10
    dim: int = 32
    n_per_class: int = 200
    intra_spread: float = 0.35
    inter_separation: float = 0.6
    seed: int = 0

    def validate(self):
        if self.num_classes < 1 or self.n_per_class < 1:
            raise ValueError('need at least one class and one sample per class')
        if self.dim < 2:
            raise ValueError('dimension must be at least 2')
        if self.intra_spread < 0 or self.inter_separation < 0:
            raise ValueError('spread and separation must be non-negative')
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__}).validate()


@dataclass
class LabeledFeatures:
    """Feature rows with optional 1-based labels"""
    features: torch.Tensor
    labels: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != self.features.shape[0]:
            raise ValueError('labels length does not match row count')

    @property
    def N(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def num_classes(self):
        return int(self.labels.max()) if self.labels is not None and len(self.labels) else 0

    def subset(self, indices):
        indices = torch.as_tensor(indices, dtype=torch.long)
        labels = self.labels[indices] if self.labels is not None else None
        return LabeledFeatures(self.features[indices], labels)


def _min_angle(means):
    cos = (means @ means.t()).clamp(-1.0, 1.0)
    cos.fill_diagonal_(-1.0)
    return float(torch.arccos(cos.max()))


def _check_separation_feasible(k, d, sep):
    if k < 2:
        return
    # K points on a sphere cannot all be further apart than the regular simplex
    if sep > np.arccos(-1.0 / (k - 1)) + 1e-12:
        raise InfeasibleSeparationError('infeasible separation: {} classes cannot be {:.3f} rad apart'.format(k, sep))
    if sep > np.pi / 2 + 1e-12 and k > d + 1:
        raise InfeasibleSeparationError('d too small for K given separation: K={} d={}'.format(k, d))
    if sep > np.pi / 2 - 1e-12 and k > 2 * d:
        raise InfeasibleSeparationError('d too small for K given separation: K={} d={}'.format(k, d))
    # caps of angular radius sep/2 around the means are disjoint; exact on the circle
    cap = 0.5 * betainc((d - 1) / 2, 0.5, np.sin(sep / 2) ** 2)
    if k * cap > 1 + 1e-12:
        raise InfeasibleSeparationError('d too small for K given separation: K={} d={} separation={:.3f}'.format(
            k, d, sep))


def class_mean_directions(k, d, separation, seed, max_attempts=10_000, repulsion_steps=200, lr=0.05):
    """Seeded unit vectors with pairwise angle at least separation

    Each attempt draws random directions and spreads them by gradient descent on the pairwise exp(-squared distance)
    energy, renormalising after every step.
    """
    _check_separation_feasible(k, d, separation)
    gen = make_generator(seed, 'dataset_means')
    for attempt in range(max_attempts):
        means = l2_normalize_rows(torch.randn((k, d), generator=gen, dtype=DTYPE))
        if k < 2 or _min_angle(means) >= separation:
            return means
        x = means.clone().requires_grad_(True)
        for step in range(repulsion_steps):
            energy = separation_loss(x)
            grad, = torch.autograd.grad(energy, x)
            with torch.no_grad():
                x -= lr * grad
                x.copy_(l2_normalize_rows(x))
            if step % 10 == 9 and _min_angle(x.detach()) >= separation:
                break
        means = x.detach()
        if _min_angle(means) >= separation:
            logger.debug('class means found after %d attempts', attempt + 1)
            return means
    raise InfeasibleSeparationError('infeasible separation after {} attempts'.format(max_attempts))


def generate_dataset(spec):
    """Samples unit-norm features around well-separated class means

    Each sample is its class mean rotated by an N(0, intra_spread) angle towards a uniformly random tangent direction.
    Rows are grouped by class, labels run 1..K.

    :param spec: DatasetSpec

    :return: LabeledFeatures
    """
    spec.validate()
    k, d, n = spec.num_classes, spec.dim, spec.n_per_class
    means = class_mean_directions(k, d, spec.inter_separation, spec.seed)
    gen = make_generator(spec.seed, 'dataset_samples')
    mu = means.repeat_interleave(n, dim=0)
    directions = torch.randn((k * n, d), generator=gen, dtype=DTYPE)
    angles = torch.randn((k * n, 1), generator=gen, dtype=DTYPE) * spec.intra_spread
    tangent = directions - (directions * mu).sum(1, keepdim=True) * mu
    tangent = l2_normalize_rows(tangent)
    samples = torch.cos(angles) * mu + torch.sin(angles) * tangent
    if spec.intra_spread == 0:
        samples = mu.clone()
    labels = torch.arange(1, k + 1).repeat_interleave(n)
    return LabeledFeatures(l2_normalize_rows(samples), labels)


def few_shot_split(data, shots, seed):
    """Seeded per-class split with exactly `shots` training samples per class

    :param data: LabeledFeatures

    :param shots: int

    :param seed: int

    :return: 2-tuple of LabeledFeatures (train, test)
    """
    gen = make_generator(seed, 'split')
    train_idx = []
    for k in range(1, data.num_classes + 1):
        members = torch.nonzero(data.labels == k).squeeze(1)
        if len(members) <= shots:
            raise ValueError('insufficient samples: class {} has {} samples for {} shots'.format(
                k, len(members), shots))
        perm = torch.randperm(len(members), generator=gen)
        train_idx.append(members[perm[:shots]])
    train_idx = torch.cat(train_idx)
    mask = torch.ones(data.N, dtype=torch.bool)
    mask[train_idx] = False
    test_idx = torch.nonzero(mask).squeeze(1)
    return data.subset(train_idx), data.subset(test_idx)


class Adapter(nn.Module):
    """Trainable d -> d affine map, identity at initialisation, standing in for the partially fine-tuned encoder"""

    def __init__(self, dim, enabled=True):
        super(Adapter, self).__init__()
        self.enabled = enabled
        self.lin = nn.Linear(dim, dim, dtype=DTYPE)
        with torch.no_grad():
            self.lin.weight.copy_(torch.eye(dim, dtype=DTYPE))
            self.lin.bias.zero_()

    def forward(self, x):
        if not self.enabled:
            return x
        if x.shape[1] != self.lin.in_features:
            raise ValueError('dimension mismatch: adapter expects {}, got {}'.format(self.lin.in_features, x.shape[1]))
        return l2_normalize_rows(self.lin(x))


def apply_adapter(data, adapter):
    """Adapted features; a disabled adapter returns the input tensor itself

    :param data: LabeledFeatures or torch.tensor (N, d)

    :param adapter: Adapter

    :return: torch.tensor (N, d)
    """
    features = data.features if isinstance(data, LabeledFeatures) else data
    return adapter(features)


def encode_embeddings(data):
    """Serialises to the PCQE v1 byte layout (little-endian, no padding)"""
    features = data.features.detach().cpu().numpy()
    rows, cols = features.shape
    has_labels = data.labels is not None
    out = [HEADER.pack(MAGIC, FORMAT_VERSION, rows, cols, 1 if has_labels else 0),
           np.ascontiguousarray(features, dtype='<f4').tobytes()]
    if has_labels:
        labels = data.labels.detach().cpu().numpy()
        if rows and (labels.min() < 1 or labels.max() > 0xFFFF):
            raise LabelRangeError('label out of range')
        out.append(np.ascontiguousarray(labels, dtype='<u2').tobytes())
    return b''.join(out)


def decode_embeddings(blob, num_classes=None):
    """Parses PCQE v1 bytes; features come back as float64 holding the stored float32 values"""
    if len(blob) < HEADER.size:
        if blob[:4] != MAGIC[:len(blob[:4])]:
            raise BadMagicError('bad magic')
        raise TruncatedPayloadError('truncated payload: header incomplete')
    magic, version, rows, cols, has_labels = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError('bad magic')
    if version != FORMAT_VERSION:
        raise VersionMismatchError('version mismatch: file version {}, expected {}'.format(version, FORMAT_VERSION))
    if has_labels not in (0, 1):
        raise EmbeddingFileError('invalid has_labels flag {}'.format(has_labels))
    n_payload = rows * cols * 4
    n_labels = rows * 2 if has_labels else 0
    expected = HEADER.size + n_payload + n_labels
    if len(blob) < expected:
        raise TruncatedPayloadError('truncated payload: {} bytes, expected {}'.format(len(blob), expected))
    if len(blob) > expected:
        raise EmbeddingFileError('trailing bytes: {} bytes, expected {}'.format(len(blob), expected))
    features = np.frombuffer(blob, dtype='<f4', count=rows * cols, offset=HEADER.size).reshape(rows, cols)
    labels = None
    if has_labels:
        raw = np.frombuffer(blob, dtype='<u2', count=rows, offset=HEADER.size + n_payload)
        if rows and (raw.min() < 1 or (num_classes is not None and raw.max() > num_classes)):
            raise LabelRangeError('label out of range')
        labels = torch.from_numpy(raw.astype(np.int64))
    return LabeledFeatures(torch.from_numpy(features.astype(np.float64)), labels)


def write_embeddings(path, data):
    """Atomically writes data to path in the PCQE format"""
    atomic_write(path, encode_embeddings(data))


def read_embeddings(path, num_classes=None):
    """Reads a PCQE file

    :param path: str

    :param num_classes: int (default = None)
        If given, labels above it raise LabelRangeError

    :return: LabeledFeatures
    """
    with open(path, 'rb') as f:
        return decode_embeddings(f.read(), num_classes)
