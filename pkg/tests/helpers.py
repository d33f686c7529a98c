"""Shared fixtures-by-function for the test modules."""

import numpy as np

from silocate.datagen import ClientDataset
from silocate.model import (
    GROUPS,
    LatentNoise,
    flatten_model_grads,
    local_objective,
)
from silocate.numkernel import finite_diff_gradcheck

NON_REF = tuple(g for g in GROUPS if g != "enc_ref")


def random_batch(rng, n, d_shared, d_private, binary=False):
    y = rng.integers(0, 2, n).astype(float) if binary else rng.normal(size=n)
    return ClientDataset(
        0,
        rng.normal(size=(n, d_shared)),
        rng.normal(size=(n, d_private)),
        treatment=rng.integers(0, 2, n).astype(float),
        outcome=y,
    )


def model_gradcheck(model, batch, omega, noise=None, **kw):
    """Worst relative error over all groups.

    Non-reference groups are checked against ``total``; the reference encoder
    only sees its auxiliary loss, so it is checked against ``reference``.
    """
    _, grads = local_objective(model, batch, omega, noise=noise, **kw)
    worst = 0.0
    for groups, field in ((NON_REF, "total"), (("enc_ref",), "reference")):
        base = model.flat(groups)

        def loss(vec, groups=groups, field=field):
            m = model.copy()
            m.set_flat(vec, groups)
            return getattr(local_objective(m, batch, omega, noise=noise, **kw)[0], field)

        worst = max(worst, finite_diff_gradcheck(loss, base, flatten_model_grads(grads, groups)))
    return worst


def draw_noise(rng, n, z):
    return LatentNoise.draw(rng, n, z)
