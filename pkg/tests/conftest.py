import numpy as np
import pytest

from treelso.gbt import GbtConfig, Leaf, SplitNode, TreeEnsemble
from treelso.treeopt import VariableDomain


def random_tree(rng, domain_sizes, depth, value_grid=None):
    """Random categorical tree of at most ``depth`` levels.

    With ``value_grid`` set, leaf values are drawn from that small set so
    ties between assignments are common.
    """
    if depth == 0 or rng.random() < 0.2:
        v = float(rng.choice(value_grid)) if value_grid is not None else float(rng.normal())
        return Leaf(v, 1)
    f = int(rng.integers(len(domain_sizes)))
    k = domain_sizes[f]
    size = int(rng.integers(1, k))
    left = frozenset(int(c) for c in rng.choice(k, size=size, replace=False))
    return SplitNode(f, left, random_tree(rng, domain_sizes, depth - 1, value_grid),
                     random_tree(rng, domain_sizes, depth - 1, value_grid), float(rng.random()))


def random_ensemble(rng, n_features, k, n_trees, depth=2, ties=False):
    sizes = (int(k),) * n_features
    grid = [0.0, 0.5, 1.0] if ties else None
    trees = tuple(random_tree(rng, sizes, depth, grid) for _ in range(n_trees))
    base = 0.0 if ties else float(rng.normal())
    return TreeEnsemble(base, trees, sizes, GbtConfig())


def random_box(rng, model, max_free=4, fixed_only=False):
    """Random domain with up to ``max_free`` free features (random subsets)."""
    sizes = model.domain_sizes
    n = len(sizes)
    n_free = 0 if fixed_only else int(rng.integers(0, min(max_free, n) + 1))
    free = set(rng.choice(n, size=n_free, replace=False).tolist())
    allowed = []
    for j, k in enumerate(sizes):
        if j in free:
            m = int(rng.integers(2, k + 1))
            allowed.append(tuple(rng.choice(k, size=m, replace=False).tolist()))
        else:
            allowed.append((int(rng.integers(k)),))
    return VariableDomain(tuple(allowed), sizes)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def reconstruction_grad_check(model, images, n_entries=40, step=1e-5, seed=0):
    """Compare straight-through and central-difference gradients.

    Works on a float64 copy.  The quantization offset ``zq - ze`` is frozen at
    the starting parameters, so the reconstruction loss is a piecewise-smooth
    function of every encoder and decoder weight.  Coordinates whose +-step
    perturbation flips the sign of any leaky-ReLU input straddle a kink, where
    central differences do not estimate the derivative; they are skipped.

    Returns ``(max_relative_error, n_checked, n_skipped)``.
    """
    import copy

    import torch
    import torch.nn as nn

    m = copy.deepcopy(model).double()
    x, _ = m._images(images)
    ze = m._encode(x)
    offset = (m.codebook[m._nearest(ze.detach())] - ze).detach()

    signs = []
    for mod in m.modules():
        if isinstance(mod, nn.LeakyReLU):
            mod.register_forward_pre_hook(lambda _, inp: signs.append(inp[0] > 0))

    def frozen_loss():
        signs.clear()
        recon = m._decode(m._encode(x) + offset)
        loss = ((recon - x.permute(0, 2, 3, 1)) ** 2).mean().item()
        return loss, [s.clone() for s in signs]

    m.zero_grad()
    rec, _, _ = m.forward_losses(x)
    rec.mean().backward()
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    params = [p for name, p in m.named_parameters() if name != "codebook"]
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in rng.choice(flat.numel(), size=min(n_entries, flat.numel()), replace=False):
                old = flat[i].item()
                flat[i] = old + step
                up, up_signs = frozen_loss()
                flat[i] = old - step
                down, down_signs = frozen_loss()
                flat[i] = old
                if any(not torch.equal(a, b) for a, b in zip(up_signs, down_signs)):
                    skipped += 1
                    continue
                numeric = (up - down) / (2 * step)
                analytic = p.grad.view(-1)[i].item()
                denom = max(abs(analytic), abs(numeric), 1e-8)
                worst = max(worst, abs(analytic - numeric) / denom)
                checked += 1
    return worst, checked, skipped
