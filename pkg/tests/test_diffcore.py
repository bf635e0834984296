from .test_simple import *


# diffcore.py
def test_softmax_rows():
    out = softmax_rows(torch.zeros((1, 3), dtype=torch.float64))
    assert torch.allclose(out, torch.full((1, 3), 1 / 3, dtype=torch.float64), atol=1e-15)
    two = softmax_rows(torch.tensor([[math.log(2.), 0.]], dtype=torch.float64))
    assert torch.allclose(two, torch.tensor([[2 / 3, 1 / 3]], dtype=torch.float64), atol=1e-15)


def test_softmax_rows_extremes():
    out = softmax_rows(torch.tensor([[1000., 0.], [-1000., -1000.]], dtype=torch.float64), temperature=1e-3)
    assert torch.isfinite(out).all()
    assert torch.allclose(out.sum(1), torch.ones(2, dtype=torch.float64))


def test_softmax_rows_errors():
    with pytest.raises(ValueError, match='invalid temperature'):
        softmax_rows(torch.zeros((1, 2), dtype=torch.float64), 0.)
    with pytest.raises(ValueError, match='non-finite input'):
        softmax_rows(torch.tensor([[float('nan'), 0.]], dtype=torch.float64))


def test_l2_normalize_rows():
    out = l2_normalize_rows(torch.tensor([[3., 4.], [0., 1.]], dtype=torch.float64))
    assert torch.allclose(out, torch.tensor([[0.6, 0.8], [0., 1.]], dtype=torch.float64))
    with pytest.raises(ValueError, match='degenerate zero vector'):
        l2_normalize_rows(torch.zeros((1, 2), dtype=torch.float64))


def test_cosine_similarity_matrix():
    e = torch.eye(2, dtype=torch.float64)
    assert torch.allclose(cosine_similarity_matrix(e, e), e)
    gen = make_generator(0, 'cos')
    a = torch.randn((3, 2), generator=gen, dtype=torch.float64)
    b = torch.randn((2, 2), generator=gen, dtype=torch.float64)
    out = cosine_similarity_matrix(a, b)
    for i in range(3):
        for k in range(2):
            expected = float(a[i] @ b[k]) / (float(a[i].norm()) * float(b[k].norm()))
            assert abs(float(out[i, k]) - expected) < 1e-12
    with pytest.raises(ValueError, match='dimension mismatch'):
        cosine_similarity_matrix(a, torch.ones((2, 3), dtype=torch.float64))


def test_grad_check():
    assert grad_check(lambda x: (x ** 2).sum(), torch.tensor([1., 2.])) < 1e-8
    assert grad_check(lambda x: torch.tensor(3., dtype=torch.float64), torch.tensor([1., 2.])) < 1e-10
    with pytest.raises(ValueError, match='non-finite evaluation'):
        grad_check(lambda x: x.sum() / 0., torch.tensor([1.]))


def test_grad_check_total_loss():
    gen = make_generator(1, 'gc')
    feats = torch.randn((4, 5), generator=gen, dtype=torch.float64)
    labels = torch.tensor([1, 2, 3, 1])
    hard = F.one_hot(torch.tensor([0, 1, 2, 2]), 3).to(torch.float64)

    def loss(flat):
        protos = flat.reshape(3, 5)
        terms = total_loss(align_loss(feats, protos, labels), compactness_loss(feats, hard, protos),
                           separation_loss(protos))
        return terms.total

    assert grad_check(loss, torch.randn(15, generator=gen, dtype=torch.float64)) < 1e-4


def test_parameter_grad_check():
    lin = torch.nn.Linear(3, 2, dtype=torch.float64)
    x = torch.randn((4, 3), generator=make_generator(0, 'lin'), dtype=torch.float64)
    errors = parameter_grad_check(dict(lin.named_parameters()), lambda: torch.tanh(lin(x)).pow(2).sum())
    assert set(errors) == {'weight', 'bias'}
    assert max(errors.values()) < 1e-6
    assert lin.weight.grad is None


def test_softmax_rows_preserves_argmax():
    m = torch.randn((1000, 6), generator=make_generator(2, 'argmax'), dtype=torch.float64)
    for temperature in (0.1, 1.0, 5.0):
        assert torch.equal(softmax_rows(m, temperature).argmax(1), m.argmax(1))


def test_cosine_similarity_rescale_invariant():
    gen = make_generator(3, 'cos')
    a = torch.randn((10, 4), generator=gen, dtype=torch.float64)
    b = torch.randn((5, 4), generator=gen, dtype=torch.float64)
    scale = torch.rand((10, 1), generator=gen, dtype=torch.float64) * 100 + 1e-3
    assert torch.allclose(cosine_similarity_matrix(a * scale, b * 0.25), cosine_similarity_matrix(a, b), atol=1e-12)
