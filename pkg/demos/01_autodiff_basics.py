"""Tour of the reverse-mode autodiff engine.

Builds a tiny two-layer classifier out of raw tensor ops, checks one
gradient against central finite differences, then trains it for a few
epochs on a toy two-moons-style problem.
"""

import numpy as np

from vflhssl import tensor as T


def finite_diff(fn, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        x[idx] += h
        hi = fn()
        x[idx] -= 2 * h
        lo = fn()
        x[idx] += h
        g[idx] = (hi - lo) / (2 * h)
    return g


def main():
    rng = np.random.default_rng(0)

    # --- a gradient check, the foundation everything else rests on --------
    w_vals = rng.normal(size=(4, 3))
    x = T.Tensor(rng.normal(size=(8, 4)))
    labels = rng.integers(0, 3, size=8)

    w = T.Tensor(w_vals, requires_grad=True)
    loss = T.softmax_cross_entropy(T.matmul(x, w), labels)
    loss.backward()

    numeric = finite_diff(
        lambda: T.softmax_cross_entropy(T.matmul(x, T.Tensor(w_vals)), labels).item(),
        w_vals,
    )
    err = np.abs(w.grad - numeric).max()
    print(f"max |analytic - finite difference| = {err:.2e}")
    assert err < 1e-8

    # --- train a small network with the same machinery ---------------------
    n = 400
    angle = rng.uniform(0, np.pi, size=n)
    cls = rng.integers(0, 2, size=n)
    pts = np.stack([np.cos(angle), np.sin(angle)], axis=1)
    pts[cls == 1] = pts[cls == 1] * -1 + [1.0, 0.5]
    pts += rng.normal(scale=0.1, size=pts.shape)

    w1 = T.Tensor(rng.normal(scale=0.5, size=(2, 16)), requires_grad=True)
    b1 = T.Tensor(np.zeros((1, 16)), requires_grad=True)
    w2 = T.Tensor(rng.normal(scale=0.5, size=(16, 2)), requires_grad=True)
    b2 = T.Tensor(np.zeros((1, 2)), requires_grad=True)
    opt = T.SgdOptimizer([w1, b1, w2, b2], 0.5, momentum=0.9)

    def forward(batch):
        h = T.relu(T.add(T.matmul(T.Tensor(batch), w1), b1))
        return T.add(T.matmul(h, w2), b2)

    for epoch in range(30):
        loss = T.softmax_cross_entropy(forward(pts), cls)
        loss.backward()
        opt.step()
        if epoch % 10 == 9:
            acc = (forward(pts).values.argmax(axis=1) == cls).mean()
            print(f"epoch {epoch + 1:2d}  loss {loss.item():.4f}  acc {acc:.3f}")


if __name__ == "__main__":
    main()
