"""Shared test utilities: the central finite-difference gradient oracle."""

import numpy as np

from sessionlm import autodiff as ad


def check_gradients(
    build_loss, leaves, step=1e-5, rel_tol=1e-4, max_coords=6, seed=0, floor=1e-5
):
    """Compare tape gradients against central finite differences.

    ``build_loss`` must rebuild the forward pass from the leaves' current
    data (re-seeding any rngs) and return a scalar Tensor. Leaves must be
    float64 for the stated tolerances to hold. For large tensors only
    ``max_coords`` randomly sampled coordinates are perturbed.
    """
    with ad.Tape() as tape:
        loss = build_loss()
    grads = tape.backward(loss)
    coord_rng = np.random.default_rng(seed)
    for leaf in leaves:
        assert leaf.data.dtype == np.float64, "gradient checks run in 64-bit mode"
        analytic = grads[leaf.node_id].reshape(-1)
        flat = leaf.data.reshape(-1)
        n = flat.shape[0]
        if n <= max_coords:
            coords = range(n)
        else:
            coords = sorted(coord_rng.choice(n, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = float(build_loss().data)
            flat[c] = orig - step
            down = float(build_loss().data)
            flat[c] = orig
            fd = (up - down) / (2.0 * step)
            ana = float(analytic[c])
            denom = max(abs(fd), abs(ana), floor)
            assert abs(fd - ana) <= rel_tol * denom, (
                f"gradient mismatch at coord {c}: analytic {ana}, "
                f"finite-difference {fd} (shape {leaf.data.shape})"
            )


def leaf(rng, *shape, scale=1.0):
    """float64 gradient-tracked tensor with standard-normal entries."""
    return ad.tensor(rng.normal(0.0, scale, size=shape), dtype=np.float64, requires_grad=True)
