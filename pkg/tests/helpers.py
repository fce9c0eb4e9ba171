"""Shared test utilities: finite-difference gradient checking and batch
construction for the reference classifier."""

import numpy as np

from fedsim import refmodel


def random_batch(config, n_rows, rng, min_tokens=1):
    """Batch of random non-PAD token rows (ids >= 2 so PAD/UNK stay special)."""
    L = config.max_len
    ids = np.zeros((n_rows, L), dtype=np.int64)
    for i in range(n_rows):
        n_tok = int(rng.integers(min_tokens, L + 1))
        ids[i, :n_tok] = rng.integers(2, config.vocab_size, size=n_tok)
    labels = rng.integers(0, config.n_classes, size=n_rows)
    return refmodel.Batch(token_ids=ids, labels=labels)


def perturb_hot(params, rng, scale=0.1):
    """Randomize hot parameters in place.

    Keeps gradient checks meaningful for adapters that initialize at exact
    zeros (where the analytic and numeric gradients would both vanish).
    """
    vec = params.hot_vector()
    params.set_hot_vector(vec + scale * rng.normal(size=vec.shape))


def finite_difference_check(params, batch, hooks=(), eps=1e-5,
                            rel_tol=1e-4, abs_tol=1e-7, coords=None, rng=None):
    """Compare analytic hot gradients against central finite differences.

    Returns the worst relative error observed.  ``coords`` limits the check
    to a subset of hot coordinates (all of them by default).
    """
    loss0, grads = refmodel.loss_and_grad(params, batch, hooks=hooks)
    analytic = refmodel.hot_grad_vector(params, grads)
    base = params.hot_vector()
    n = base.shape[0]
    if coords is None:
        idx = np.arange(n)
    else:
        idx = np.asarray(coords)
    worst = 0.0
    for k in idx:
        for sign, store in ((+1.0, "hi"), (-1.0, "lo")):
            v = base.copy()
            v[k] += sign * eps
            params.set_hot_vector(v)
            loss = refmodel.loss_and_grad(params, batch, hooks=hooks)[0]
            if sign > 0:
                hi = loss
            else:
                lo = loss
        fd = (hi - lo) / (2.0 * eps)
        err = abs(analytic[k] - fd)
        denom = max(abs(analytic[k]), abs(fd), abs_tol)
        rel = err / denom
        worst = max(worst, rel)
        assert rel < rel_tol or err < abs_tol, (
            f"gradient mismatch at hot coordinate {k}: "
            f"analytic {analytic[k]:.3e} vs fd {fd:.3e} (rel {rel:.3e})"
        )
    params.set_hot_vector(base)
    return worst
