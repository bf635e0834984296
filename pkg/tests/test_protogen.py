import numpy as np

from .test_simple import *


# protogen.py
def test_prompt_bank_shapes():
    bank = PromptBank(3, 4, 5, seed=0)
    assert bank.sequences().shape == (3, 25)
    assert bank.prompts.requires_grad
    assert not bank.class_tokens.requires_grad
    assert not PromptBank(3, 4, 5, seed=0, trainable=False).prompts.requires_grad
    assert PromptBank(3, 0, 5).sequences().shape == (3, 5)


def test_encode_prototypes_deterministic():
    p1 = encode_prototypes(PromptBank(4, 2, 6, seed=1), EncoderSurrogate(2, 6, 6, seed=1))
    p2 = encode_prototypes(PromptBank(4, 2, 6, seed=1), EncoderSurrogate(2, 6, 6, seed=1))
    assert torch.equal(p1.vectors, p2.vectors)
    assert torch.allclose(p1.vectors.norm(dim=1), torch.ones(4, dtype=torch.float64))
    assert p1.is_distinct()


def test_encode_prototypes_gradient_reaches_prompts():
    bank = PromptBank(3, 2, 4, seed=0)
    surrogate = EncoderSurrogate(2, 4, 4, seed=0)
    encode_prototypes(bank, surrogate).vectors.sum().backward()
    assert bank.prompts.grad is not None
    assert all(p.grad is None for p in surrogate.parameters())


def test_surrogate_dimension_mismatch():
    with pytest.raises(ValueError, match='dimension mismatch'):
        EncoderSurrogate(2, 4, 4)(torch.zeros((3, 5), dtype=torch.float64))


def test_codebook_prototypes():
    a = codebook_prototypes(5, 3, seed=2)
    b = codebook_prototypes(5, 3, seed=2)
    assert torch.equal(a.vectors, b.vectors)
    assert a.strategy == 'codebook'
    assert torch.allclose(a.vectors.norm(dim=1), torch.ones(5, dtype=torch.float64))


def test_centroid_prototypes_identity():
    features = torch.tensor([[3., 4.], [0., 2.]], dtype=torch.float64)
    protos = centroid_prototypes(features, torch.tensor([1, 2]))
    assert torch.allclose(protos.vectors, torch.tensor([[0.6, 0.8], [0., 1.]], dtype=torch.float64))


def test_centroid_prototypes_duplicates():
    features = torch.tensor([[0., 1.], [0., 1.], [1., 0.]], dtype=torch.float64)
    protos = centroid_prototypes(features, torch.tensor([1, 1, 2]))
    assert torch.equal(protos.vectors[0], torch.tensor([0., 1.], dtype=torch.float64))


def test_centroid_prototypes_errors():
    features = torch.tensor([[1., 0.], [-1., 0.], [0., 1.]], dtype=torch.float64)
    with pytest.raises(ValueError, match='degenerate centroid'):
        centroid_prototypes(features, torch.tensor([1, 1, 2]))
    with pytest.raises(ValueError, match='empty class'):
        centroid_prototypes(features, torch.tensor([1, 1, 3]))


def _best_partition(points):
    """Exhaustive minimum within-cluster sum of squares over all 2-partitions, point 0 fixed in cluster 0"""
    x = points.numpy()
    n = x.shape[0]
    masks = ((np.arange(1, 2 ** (n - 1))[:, None] >> np.arange(n - 1)) & 1).astype(np.float64)
    n1 = masks.sum(1)
    s1 = masks @ x[1:]
    s0 = x.sum(0) - s1
    cost = -(s1 ** 2).sum(1) / n1 - (s0 ** 2).sum(1) / (n - n1)
    return torch.tensor(np.concatenate([[0], masks[int(np.argmin(cost))]]), dtype=torch.long)


def test_lloyd_kmeans_matches_exhaustive_partition():
    gen = make_generator(0, 'kmeans')
    a = torch.randn((10, 2), generator=gen, dtype=torch.float64) * 0.3 + torch.tensor([3., 0.], dtype=torch.float64)
    b = torch.randn((10, 2), generator=gen, dtype=torch.float64) * 0.3 - torch.tensor([3., 0.], dtype=torch.float64)
    points = torch.cat([a, b])
    labels = torch.tensor([1] * 10 + [2] * 10)
    _, assignment = lloyd_kmeans(points, class_means(points, labels, 2), 10)
    best = _best_partition(points)
    assert torch.equal(assignment, best) or torch.equal(assignment, 1 - best)


def test_centroid_prototypes_kmeans_relabel():
    gen = make_generator(1, 'kmeans')
    a = torch.randn((5, 3), generator=gen, dtype=torch.float64) * 0.1 + torch.tensor([0., 1., 0.], dtype=torch.float64)
    b = torch.randn((5, 3), generator=gen, dtype=torch.float64) * 0.1 + torch.tensor([1., 0., 0.], dtype=torch.float64)
    features = torch.cat([a, b])
    labels = torch.tensor([1] * 5 + [2] * 5)
    protos = centroid_prototypes(features, labels, iterations=10)
    assert protos.vectors[0, 1] > 0.9
    assert protos.vectors[1, 0] > 0.9


def test_encode_prototypes_sensitive_to_prompts():
    for seed in range(10):
        bank = PromptBank(4, 3, 6, seed=seed)
        surrogate = EncoderSurrogate(3, 6, 6, seed=seed)
        before = encode_prototypes(bank, surrogate).vectors.detach().clone()
        direction = torch.randn(6, generator=make_generator(seed, 'perturb'), dtype=torch.float64)
        with torch.no_grad():
            bank.prompts[0] += 1e-2 * direction / direction.norm()
        after = encode_prototypes(bank, surrogate).vectors.detach()
        assert (after - before).norm(dim=1).max() > 1e-6


def test_codebook_rows_distinct():
    for seed in range(100):
        v = codebook_prototypes(16, 8, seed=seed).vectors.detach()
        cos = v @ v.t()
        cos.fill_diagonal_(-1.)
        assert cos.max() < 1 - 1e-12


def test_centroid_prototypes_match_scalar_means():
    gen = make_generator(4, 'centroid')
    features = torch.randn((30, 5), generator=gen, dtype=torch.float64)
    labels = torch.arange(30) % 3 + 1
    protos = centroid_prototypes(features, labels)
    for k in range(1, 4):
        total, count = [0.] * 5, 0
        for i in range(30):
            if int(labels[i]) == k:
                total = [t + float(x) for t, x in zip(total, features[i])]
                count += 1
        mean = [t / count for t in total]
        norm = math.sqrt(sum(x * x for x in mean))
        for j in range(5):
            assert abs(float(protos.vectors[k - 1, j]) - mean[j] / norm) < 1e-12
