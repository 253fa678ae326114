import math
from typing import Dict, List, Tuple

import numpy as np

import transpillars


###############################################################################
# Optimizer
###############################################################################


class AdamW:
    """Adaptive moment estimation with decoupled weight decay"""

    def __init__(
        self,
        named_parameters: List[Tuple[str, 'transpillars.tensor.Tensor']],
        lr: float,
        betas: Tuple[float, float] = (.9, .999),
        eps: float = 1e-8,
        weight_decay: float = .01) -> None:
        """Create optimizer

        Arguments
            named_parameters
                (name, tensor) pairs to optimize
            lr
                Initial learning rate
            betas
                Decay rates of the first and second moment estimates
            eps
                Denominator floor
            weight_decay
                Decoupled weight decay coefficient
        """
        self.parameters = list(named_parameters)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self.first = {
            name: np.zeros_like(p.data) for name, p in self.parameters}
        self.second = {
            name: np.zeros_like(p.data) for name, p in self.parameters}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Restore moments and step count"""
        self.steps = int(state['steps'])
        for name, _ in self.parameters:
            self.first[name] = np.array(state[f'first/{name}'])
            self.second[name] = np.array(state[f'second/{name}'])

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Retrieve moments and step count"""
        state = {'steps': np.array(self.steps)}
        for name, _ in self.parameters:
            state[f'first/{name}'] = self.first[name]
            state[f'second/{name}'] = self.second[name]
        return state

    def step(self) -> None:
        """Update every parameter that has a gradient"""
        self.steps += 1
        beta1, beta2 = self.betas
        correction1 = 1. - beta1 ** self.steps
        correction2 = 1. - beta2 ** self.steps
        for name, p in self.parameters:
            if p.grad is None:
                continue
            first, second = self.first[name], self.second[name]
            first *= beta1
            first += (1. - beta1) * p.grad
            second *= beta2
            second += (1. - beta2) * p.grad * p.grad
            p.data *= 1. - self.lr * self.weight_decay
            p.data -= (self.lr * (first / correction1) /
                       (np.sqrt(second / correction2) + self.eps)).astype(
                           p.data.dtype)


###############################################################################
# Utilities
###############################################################################


def clip_grad_norm(
    parameters: List['transpillars.tensor.Tensor'],
    max_norm: float) -> float:
    """Rescale gradients in place so their global norm is at most max_norm

    Returns
        The norm before clipping
    """
    grads = [p.grad for p in parameters if p.grad is not None]
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in parameters:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return norm


def cosine_lr(
    step: int,
    total_steps: int,
    lr_max: float,
    lr_min: float = 0.) -> float:
    """Cosine-annealed learning rate

    Arguments
        step
            The current step in [0, total_steps]
        total_steps
            The step at which the schedule reaches lr_min
        lr_max
            Learning rate at step 0
        lr_min
            Learning rate at total_steps

    Returns
        The learning rate
    """
    progress = min(step, total_steps) / max(total_steps, 1)
    return lr_min + .5 * (lr_max - lr_min) * (1. + math.cos(math.pi * progress))
