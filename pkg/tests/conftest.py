"""Shared test helpers: the central finite-difference gradient oracle.

The oracle perturbs individual parameter entries and compares the resulting
loss slope against the gradient that backward() assigned. Re-evaluations run
outside any GradTape, so they cost only the forward pass.
"""

import numpy as np
import pytest

from adpf.tensor import GradTape, Tensor, backward

FD_STEP = 1e-5
FD_RTOL = 1e-4
# Below this gradient magnitude the h^2 truncation and float64 cancellation
# noise of the central difference dominate any relative comparison, so tiny
# entries are held to an absolute bound instead.
FD_TINY = 1e-6
FD_ATOL = 1e-7


def rand_tensor(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def fd_check(loss_fn, tensors, rng, probes=20, h=FD_STEP, rtol=FD_RTOL):
    """Assert analytic gradients of loss_fn match central differences.

    loss_fn: nullary callable returning a scalar Tensor, closing over
    `tensors` (and only constants otherwise, so re-evaluation is pure).
    Probes are spread over randomly chosen entries of the listed tensors.
    """
    for t in tensors:
        t.zero_grad()
    with GradTape():
        loss = loss_fn()
        backward(loss)
    grads = [t.grad.copy() for t in tensors]
    for t in tensors:
        t.zero_grad()

    sizes = np.array([t.data.size for t in tensors])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(probes, total), replace=False)
    bounds = np.cumsum(sizes)
    for flat in picks:
        which = int(np.searchsorted(bounds, flat, side="right"))
        idx = int(flat - (bounds[which - 1] if which else 0))
        t = tensors[which]
        orig = t.data.flat[idx]
        t.data.flat[idx] = orig + h
        up = loss_fn().item()
        t.data.flat[idx] = orig - h
        down = loss_fn().item()
        t.data.flat[idx] = orig
        fd = (up - down) / (2.0 * h)
        an = grads[which].flat[idx]
        scale = max(abs(fd), abs(an))
        if scale < FD_TINY:
            assert abs(fd - an) < FD_ATOL, (
                f"tensor {which} entry {idx}: fd={fd:.3e} analytic={an:.3e}")
        else:
            rel = abs(fd - an) / scale
            assert rel <= rtol, (
                f"tensor {which} entry {idx}: fd={fd:.6e} analytic={an:.6e} rel={rel:.2e}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
