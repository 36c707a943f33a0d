"""Shared numeric oracles for the test suite."""

import numpy as np

from poisonlab import diffcore as dc

FD_H = 1e-5


def finite_difference_grads(loss_fn, params, h=FD_H):
    """Central-difference gradients of a scalar loss.

    ``loss_fn`` takes no arguments, reads ``params`` by closure and
    returns a single-element Tensor. Parameter data is perturbed in
    place and restored exactly.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def autodiff_grads(loss_fn, params):
    """Gradients of the same closure through the tape."""
    for p in params:
        p.zero_grad()
    with dc.Tape() as tape:
        loss = loss_fn()
    dc.backward(loss, tape)
    return [p.grad.copy() for p in params]


def assert_grads_close(loss_fn, params, rtol=1e-4, atol=1e-7):
    auto = autodiff_grads(loss_fn, params)
    fd = finite_difference_grads(loss_fn, params)
    for p, a, f in zip(params, auto, fd):
        np.testing.assert_allclose(
            a, f, rtol=rtol, atol=atol,
            err_msg=f"gradient mismatch for parameter {p.name!r}")
