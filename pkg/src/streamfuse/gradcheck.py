"""Central finite-difference gradient checking in float64."""
import numpy as np

from . import tensor as T


def rel_error(analytic, numeric, floor=1e-10):
    """Elementwise |a - n| / max(|a|, |n|), maximised; entries where both are below ``floor`` are skipped."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.abs(a), np.abs(n))
    keep = denom > floor
    if not keep.any():
        return 0.0
    return float(np.max(np.abs(a - n)[keep] / denom[keep]))


def check_gradients(fn, inputs, step=1e-4, seed=0):
    """Compare analytic and numeric gradients of ``sum(fn(*inputs) * R)``.

    ``inputs`` are float64 Tensors with ``requires_grad`` set on the ones to
    check; ``R`` is a fixed random projection so every output entry counts.
    Returns the max relative error over all checked inputs.
    """
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        T.clear_tape()
        out = fn(*inputs)
        proj = rng.standard_normal(out.shape)
        loss = T.tsum(T.mul(out, T.Tensor(proj)))
        for x in inputs:
            x.grad = None
        T.backward(loss)
        worst = 0.0
        with T.no_grad():
            for x in inputs:
                if not x.requires_grad:
                    continue
                analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
                numeric = np.zeros_like(x.data)
                flat = x.data.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    fp = float(np.sum(fn(*inputs).data * proj))
                    flat[i] = orig - step
                    fm = float(np.sum(fn(*inputs).data * proj))
                    flat[i] = orig
                    numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
                worst = max(worst, rel_error(analytic, numeric))
    return worst
