"""Independent oracles shared by the test modules.

Everything here recomputes results by brute force (nested loops, central
finite differences) so library fast paths are checked against code that
shares none of their machinery.
"""

import numpy as np

from pidnet.tensor import Tape, backward


def naive_conv2d(x, w, b=None, stride=1, padding=0, pad_mode="zeros"):
    """Direct 7-loop cross-correlation on plain arrays."""
    if isinstance(stride, int):
        stride = (stride, stride)
    if isinstance(padding, int):
        padding = (padding, padding)
    sh, sw = stride
    ph, pw = padding
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    assert cin == c
    mode = "constant" if pad_mode == "zeros" else "edge"
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode=mode)
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for co in range(cout):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += w[co, ci, ki, kj] * xp[ni, ci, oi * sh + ki, oj * sw + kj]
                    out[ni, co, oi, oj] = acc
            if b is not None:
                out[ni, co] += b[co]
    return out


def fd_check(build, tensors, n_coords=20, h=1e-5, rtol=1e-4, rng=None, min_denom=1e-4):
    """Compare tape gradients of build() (a scalar Tensor) with central
    finite differences at n_coords random coordinates per tensor.

    Tensors must be float64 leaves marked trainable. Returns the worst
    relative error observed.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = build()
    backward(loss, tape)
    worst = 0.0
    for t in tensors:
        assert t.dtype == np.float64, "finite-difference checks run in float64"
        grad = np.zeros(t.shape) if t.grad is None else np.asarray(t.grad)
        flat_n = t.data.size
        k = min(n_coords, flat_n)
        picks = rng.choice(flat_n, size=k, replace=False)
        for flat_idx in picks:
            idx = np.unravel_index(flat_idx, t.shape) if t.shape else ()
            orig = t.data[idx]
            t.data[idx] = orig + h
            fp = build().item()
            t.data[idx] = orig - h
            fm = build().item()
            t.data[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            analytic = float(grad[idx]) if t.shape else float(grad)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), min_denom)
            worst = max(worst, err)
            assert err <= rtol, (
                f"grad mismatch at {idx}: analytic {analytic:.10g} vs fd {numeric:.10g}"
                f" (rel err {err:.3g})"
            )
    return worst
