"""Central finite-difference helpers shared by unit and acceptance tests."""

import numpy as np

# Entries far below the vector's largest entry are compared against a floor
# instead of their own size: the difference quotient carries round-off of
# order ulp(loss)/step, which would otherwise dominate their relative error.
DENOM_FLOOR = 1e-6
RELATIVE_FLOOR = 1e-3


def rel_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    floor = max(DENOM_FLOOR, RELATIVE_FLOOR * float(np.max(np.abs(analytic), initial=0.0)))
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def central_difference(f, x, idx, step):
    x = np.array(x, dtype=np.float64)
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        out[n] = (f(xp) - f(xm)) / (2 * step)
    return out


def probe_params(params, loss_of_params, analytic_flat, n_probes, rng, step=1e-5):
    """Relative errors of ``analytic_flat`` on ``n_probes`` random parameters."""
    flat = params.flat()
    idx = rng.choice(flat.size, size=n_probes, replace=False)
    numeric = central_difference(lambda v: loss_of_params(params.with_flat(v)), flat, idx, step)
    return rel_error(analytic_flat[idx], numeric), analytic_flat[idx], numeric
