import numpy as np


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {i: {n: np.zeros_like(t) for n, t in d.items()} for i, d in params.items()}
        self.v = {i: {n: np.zeros_like(t) for n, t in d.items()} for i, d in params.items()}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, d in grads.items():
            for name, g in d.items():
                if g is None:
                    continue
                m, v = self.m[i][name], self.v[i][name]
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                params[i][name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
