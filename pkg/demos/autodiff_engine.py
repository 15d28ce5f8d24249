"""Tour of the tape-based autodiff engine.

Builds small computations out of Tensor ops, replays the tape backwards, and
checks the results against hand-derived gradients and finite differences.
"""
import numpy as np

import pvseg.tensor as T
from pvseg.functional import group_norm, softmax
from pvseg.ops import conv2d
from pvseg.tensor import Tape, Tensor, backward


def main():
    print("== scalar chain: exp(2 log x) = x^2, so dy/dx should be 2x")
    x = Tensor(np.array(3.0), requires_grad=True)
    with Tape() as tape:
        y = T.exp(T.log(x) * 2.0)
    backward(y, tape)
    print(f"   x=3, y={y.data:.1f}, dy/dx={x.grad:.1f} (expect 6.0)")

    print("== gradients accumulate when a tensor is used twice")
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        out = (a * a).sum()          # d/da = 2a
    backward(out, tape)
    print(f"   a={a.data}, d(sum a^2)/da={a.grad} (expect 2a)")

    print("== a conv + groupnorm block, checked by finite differences")
    rng = np.random.default_rng(0)
    img = Tensor(rng.random((1, 3, 8, 8)), dtype=np.float64, requires_grad=True)
    w = Tensor(rng.standard_normal((8, 3, 3, 3)) * 0.2, dtype=np.float64,
               requires_grad=True)
    gamma = Tensor(np.ones(8), dtype=np.float64, requires_grad=True)
    beta = Tensor(np.zeros(8), dtype=np.float64, requires_grad=True)

    def loss_tensor():
        h = conv2d(img, w, stride=2, padding=1)
        h = group_norm(h, gamma, beta, groups=4)
        return (h * h).mean()

    with Tape() as tape:
        out = loss_tensor()
    backward(out, tape, params=[img, w, gamma, beta])

    eps = 1e-6
    flat = w.data.reshape(-1)
    idx = 17
    keep = flat[idx]
    flat[idx] = keep + eps
    hi = loss_tensor().data.item()
    flat[idx] = keep - eps
    lo = loss_tensor().data.item()
    flat[idx] = keep
    fd = (hi - lo) / (2 * eps)
    got = w.grad.reshape(-1)[idx]
    print(f"   dL/dw[{idx}]: reverse-mode {got:.10f} vs central difference {fd:.10f}")

    print("== nothing records outside a Tape, and detach() cuts the graph")
    z = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    with Tape() as tape:
        frozen = z.detach()
        out = (softmax(frozen * 10.0) * Tensor(np.array([1.0, 0.0]))).sum() \
            + (z * z).sum()
    backward(out, tape, params=[z])
    print(f"   grad through detach is blocked: dz={z.grad} (expect 2z only)")


if __name__ == "__main__":
    main()
