"""Central finite-difference gradient checking in double precision."""
import numpy as np
import torch


def fd_check(fn, tensors, seed=0, eps=1e-6, max_coords=8, directions=3):
    """Relative error between autograd and central differences of ``fn(*tensors)``.

    ``fn`` returns a tensor; it is reduced against a fixed random cotangent.
    Small tensors are probed coordinate by coordinate, larger ones along
    random unit directions.
    """
    rng = np.random.default_rng(seed)
    tensors = [t.detach().clone().requires_grad_(True) for t in tensors]
    out = fn(*tensors)
    cot = torch.as_tensor(rng.normal(size=tuple(out.shape)), dtype=out.dtype)

    def scalar(*ts):
        return float((fn(*ts) * cot).sum())

    grads = torch.autograd.grad((out * cot).sum(), tensors, allow_unused=True)
    analytic, numeric = [], []
    with torch.no_grad():
        for i, (t, g) in enumerate(zip(tensors, grads)):
            g = torch.zeros_like(t) if g is None else g
            if t.numel() <= max_coords:
                probes = [torch.nn.functional.one_hot(torch.tensor(k), t.numel()).to(t.dtype).view(t.shape)
                          for k in range(t.numel())]
            else:
                probes = []
                for _ in range(directions):
                    v = torch.as_tensor(rng.normal(size=tuple(t.shape)), dtype=t.dtype)
                    probes.append(v / v.norm())
            for v in probes:
                plus = [u + eps * v if j == i else u for j, u in enumerate(tensors)]
                minus = [u - eps * v if j == i else u for j, u in enumerate(tensors)]
                numeric.append((scalar(*plus) - scalar(*minus)) / (2 * eps))
                analytic.append(float((g * v).sum()))
    a, n = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-10))


def module_fd_check(module, inputs, seed=0, **kw):
    """Check gradients w.r.t. the inputs and every parameter of ``module``."""
    names = [n for n, _ in module.named_parameters()]
    params = [p.detach() for _, p in module.named_parameters()]
    k = len(inputs)

    def fn(*ts):
        state = dict(zip(names, ts[k:]))
        return torch.func.functional_call(module, state, tuple(ts[:k]))

    return fd_check(fn, list(inputs) + params, seed=seed, **kw)
