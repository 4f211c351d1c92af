"""Shared test utilities: finite-difference gradient checking and oracles."""

import numpy as np

from soekit.tensor import Tensor, backward


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    """Max per-element relative error with a unit floor on the denominator.

    Losses in these checks are O(1), so a floor of 1 keeps near-zero
    gradient entries from inflating the ratio while staying far stricter
    than the 1e-3 budget for entries of ordinary magnitude.
    """
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f, arrays, index, h=1e-3):
    """Central finite differences of scalar f w.r.t. arrays[index], in float64."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    g = np.zeros_like(base[index])
    flat = base[index].reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(base)
        flat[i] = orig - h
        fm = f(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def gradcheck(build, arrays, wrt=None, h=1e-3, tol=1e-3, seed=0):
    """Compare reverse-mode gradients against 64-bit central differences.

    build(tensors) -> scalar Tensor, constructed from float64 leaf tensors so
    the analytic pass and the numeric oracle share one precision. Returns the
    worst relative error over all checked inputs.
    """
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    tensors = [Tensor(a, requires_grad=(i in wrt), dtype=np.float64) for i, a in enumerate(arrays)]
    loss = build(tensors)
    backward(loss)

    def f(arrs):
        ts = [Tensor(a, requires_grad=False, dtype=np.float64) for a in arrs]
        return build(ts).item()

    worst = 0.0
    for i in wrt:
        assert tensors[i].grad is not None, f"input {i} received no gradient"
        ng = numeric_grad(f, arrays, i, h=h)
        err = rel_error(tensors[i].grad, ng)
        worst = max(worst, err)
        assert err < tol, f"input {i}: rel error {err:.2e} >= {tol}"
    return worst


def scalarize(t, weights):
    """Reduce an op output to a scalar sensitive to every element."""
    from soekit import tensor as T

    w = Tensor(weights, dtype=np.float64)
    return T.mean(T.mul(t, w))


def conv2d_direct(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Direct-summation convolution oracle, float64 accumulation in
    (ci, ky, kx) order, rounded once to float32."""
    b, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((b, co, ho, wo), np.float64)
    for bi in range(b):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for cc in range(ci):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += float(xp[bi, cc, i * stride + ky, j * stride + kx]) * float(w[o, cc, ky, kx])
                    out[bi, o, i, j] = acc
    return out.astype(np.float32)
