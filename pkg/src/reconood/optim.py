import numpy as np


class Adam:
    """Adam over a list of numpy arrays, updated in place."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


class RowAdam:
    """Adam on selected rows of a 2-D array, each row keeping its own step count.

    Used for per-image latents, which only receive gradients when their image is
    in the current minibatch.
    """

    def __init__(self, table, beta1=0.9, beta2=0.999, eps=1e-8):
        self.table = table
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(table)
        self.v = np.zeros_like(table)
        self.t = np.zeros(table.shape[0], dtype=np.int64)

    def step(self, rows, grads, lr):
        rows = np.asarray(rows)
        b1, b2 = self.beta1, self.beta2
        self.t[rows] += 1
        t = self.t[rows][:, None]
        m = b1 * self.m[rows] + (1 - b1) * grads
        v = b2 * self.v[rows] + (1 - b2) * grads * grads
        self.m[rows] = m
        self.v[rows] = v
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        self.table[rows] -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(self.table.dtype)
