"""Shared test utilities."""

import numpy as np

from idld import autograd as ag
from idld.autograd import Tensor


def resolve(module, dotted):
    """Owner object and attribute name for a dotted parameter path."""
    *path, leaf = dotted.split(".")
    obj = module
    for part in path:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    return obj, leaf


def param_fd(model, name, loss_fn, eps=1e-5):
    """finite_diff_check of ``loss_fn()`` with respect to one model parameter."""
    owner, attr = resolve(model, name)
    original = getattr(owner, attr)

    def f(t):
        setattr(owner, attr, t)
        try:
            return loss_fn()
        finally:
            setattr(owner, attr, original)

    return ag.finite_diff_check(f, Tensor(original.data.copy()), eps)


def zero_grads(model):
    for p in model.parameters():
        p.grad = None
