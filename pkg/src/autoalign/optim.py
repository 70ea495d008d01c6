"""SGD with momentum and AdamW over lists of parameter tensors."""

import numpy as np

from .errors import MissingGradientError


class _Optimizer:
    def __init__(self, params, lr):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr

    def _grads(self):
        grads = [p.grad for p in self.params]
        if self.params and all(g is None for g in grads):
            raise MissingGradientError("optimizer step before backward(): no parameter has a gradient")
        return grads

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class SGD(_Optimizer):
    """v <- mu v + g ;  w <- w - lr v."""

    def __init__(self, params, lr, momentum=0.9):
        super().__init__(params, lr)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v, g in zip(self.params, self.velocity, self._grads()):
            if g is None:
                continue
            v *= self.momentum
            v += g
            p.data -= self.lr * v


class AdamW(_Optimizer):
    """Adam with decoupled weight decay applied before the moment update."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        super().__init__(params, lr)
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        grads = self._grads()
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        step = self.lr / c1
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            if g is None:
                continue
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            # in place: these buffers reach ~10^7 entries for the projector heads
            m *= b1
            m += (1 - b1) * g
            v *= b2
            tmp = np.multiply(g, g)
            tmp *= 1 - b2
            v += tmp
            np.divide(v, c2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= step
            p.data -= tmp


def clip_grad_norm(params, max_norm):
    """Rescale gradients in place so their joint L2 norm is at most max_norm.

    Returns the norm before clipping.  Parameters without a gradient are ignored.
    """
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def sgd_momentum(params, lr, momentum=0.9):
    return SGD(params, lr, momentum)


def adamw(params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
    return AdamW(params, lr, betas, eps, weight_decay)


def make_optimizer(kind, params, lr, momentum=0.9, weight_decay=0.01):
    if kind == "sgd":
        return SGD(params, lr, momentum)
    if kind == "adamw":
        return AdamW(params, lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")
