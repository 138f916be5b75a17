import logging

import numpy as np

logger = logging.getLogger(__name__)


class MomentumSGD:
    """
    Heavy-ball SGD: v <- momentum * v + g; p <- p - lr * v. Parameters are numpy arrays updated
    in place; the velocity of each parameter is kept in full precision.
    """

    def __init__(self, learning_rate, momentum=0.0):
        assert learning_rate > 0, "learning rate must be positive"
        assert 0 <= momentum < 1, "momentum must lie in [0, 1)"
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity = {}

    def apply_gradients(self, grads_and_vars):
        for grad, var in grads_and_vars:
            v = self._velocity.get(id(var))
            v = grad.copy() if v is None else self.momentum * v + grad
            self._velocity[id(var)] = v
            var -= self.learning_rate * v


class Learner:
    def __init__(self, model, optimizer, grad_proc_fn=None):
        self.model = model
        self.optimizer = optimizer
        self.grad_proc_fn = grad_proc_fn

    def train(self, get_batch_fn, steps):
        for _ in range(steps):
            batch = get_batch_fn()
            self.train_step(*batch)

    def train_step(self, *args, **kwargs):
        loss, grads = self.loss_and_gradients(*args, **kwargs)
        if self.grad_proc_fn is not None:
            grads = self.grad_proc_fn(grads)
        self.optimizer.apply_gradients(zip(grads, self.model.variables))
        return loss

    def loss_and_gradients(self, *batch):
        raise NotImplementedError("To be implemented by subclasses")


def relative_l2(pred, target, axis):
    """Per-sample ||pred - target|| / ||target|| over `axis`."""
    num = np.sqrt(np.sum((pred - target) ** 2, axis=axis))
    den = np.sqrt(np.sum(target ** 2, axis=axis))
    return num / np.maximum(den, np.finfo(np.float64).tiny)
