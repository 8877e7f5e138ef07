"""Shared test helpers."""

import numpy as np

from picnet.diffcore import Rng


def to64(module):
    """Promote a module's params and buffers to float64 for gradcheck."""
    for t in module.named_params().values():
        t.data = t.data.astype(np.float64)
    for m in module.modules():
        for name in list(m._bufs):
            setattr(m, name, getattr(m, name).astype(np.float64))
    return module


def tiny_rng(seed=0):
    return Rng(seed)
