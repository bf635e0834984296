import torch


DTYPE = torch.float64
NORM_EPS = 1e-12


def check_finite(m, message='non-finite input'):
    if not torch.isfinite(m).all():
        raise ValueError(message)
    return m


def softmax_rows(m, temperature=1.0):
    """Row-wise softmax of m / temperature

    :param m: torch.tensor (rows, cols)
        The input scores

    :param temperature: float (default = 1.0)
        Must be positive. Small temperatures sharpen the distribution

    :return: torch.tensor (rows, cols)
        Each row is non-negative and sums to one
    """
    if not temperature > 0:
        raise ValueError('invalid temperature')
    check_finite(m)
    z = m / temperature
    # max-shift keeps exp in range for temperatures down to ~1e-4
    z = z - z.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def l2_normalize_rows(m):
    """Scales each row of m to unit Euclidean norm

    :param m: torch.tensor (rows, cols)

    :return: torch.tensor (rows, cols)
    """
    norms = torch.linalg.vector_norm(m, dim=-1, keepdim=True)
    if (norms < NORM_EPS).any():
        raise ValueError('degenerate zero vector')
    return m / norms


def cosine_similarity_matrix(a, b):
    """Pairwise cosine similarities between the rows of a (N, d) and the rows of b (K, d)

    :return: torch.tensor (N, K)
    """
    if a.shape[-1] != b.shape[-1]:
        raise ValueError('dimension mismatch: {} vs {}'.format(a.shape[-1], b.shape[-1]))
    return l2_normalize_rows(a) @ l2_normalize_rows(b).t()


def _evaluate(scalar_fn, x):
    value = scalar_fn(x)
    value = torch.as_tensor(value, dtype=DTYPE)
    if not torch.isfinite(value).all():
        raise ValueError('non-finite evaluation')
    return value


def relative_error(analytic, numeric):
    """|analytic - numeric| / max(1, |numeric|), elementwise"""
    return (analytic - numeric).abs() / torch.clamp(numeric.abs(), min=1.0)


def grad_check(scalar_fn, x0, step=1e-5):
    """Compares the autograd gradient of a scalar function with central differences

    :param scalar_fn: callable
        Maps a float64 tensor shaped like x0 to a scalar tensor

    :param x0: torch.tensor
        The point at which the gradient is checked

    :param step: float (default = 1e-5)
        The central-difference step

    :return: float
        The maximum relative error over all coordinates
    """
    if not step > 0:
        raise ValueError('invalid step')
    x = torch.as_tensor(x0, dtype=DTYPE).detach().clone().requires_grad_(True)
    value = _evaluate(scalar_fn, x)
    if value.requires_grad:
        analytic, = torch.autograd.grad(value, x, allow_unused=True)
    else:
        analytic = None
    if analytic is None:
        analytic = torch.zeros_like(x)

    numeric = torch.zeros_like(x)
    flat = numeric.view(-1)
    with torch.no_grad():
        base = x.detach()
        for i in range(base.numel()):
            shift = torch.zeros_like(base).view(-1)
            shift[i] = step
            shift = shift.view_as(base)
            f_plus = _evaluate(scalar_fn, base + shift)
            f_minus = _evaluate(scalar_fn, base - shift)
            flat[i] = (f_plus - f_minus) / (2 * step)
    return relative_error(analytic.detach(), numeric).max().item() if x.numel() else 0.0


def parameter_grad_check(parameters, loss_fn, step=1e-5):
    """Gradient check for registered module parameters

    Autograd gradients of loss_fn are compared against central differences obtained by perturbing each parameter in
    place, so loss_fn may close over any number of modules.

    :param parameters: dict of str -> nn.Parameter
        Typically dict(module.named_parameters())

    :param loss_fn: callable with no arguments returning a scalar tensor

    :param step: float (default = 1e-5)

    :return: dict of str -> float
        Maximum relative error per parameter
    """
    params = {name: p for name, p in parameters.items() if p.requires_grad}
    for p in params.values():
        p.grad = None
    loss = _evaluate(lambda _: loss_fn(), None)
    loss.backward()
    analytic = {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for name, p in params.items()}

    errors = {}
    with torch.no_grad():
        for name, p in params.items():
            numeric = torch.zeros_like(p)
            flat_p = p.data.view(-1)
            flat_n = numeric.view(-1)
            for i in range(flat_p.numel()):
                orig = flat_p[i].item()
                flat_p[i] = orig + step
                f_plus = _evaluate(lambda _: loss_fn(), None)
                flat_p[i] = orig - step
                f_minus = _evaluate(lambda _: loss_fn(), None)
                flat_p[i] = orig
                flat_n[i] = (f_plus - f_minus) / (2 * step)
            errors[name] = relative_error(analytic[name], numeric).max().item() if p.numel() else 0.0
    for p in params.values():
        p.grad = None
    return errors
