"""Hand-rolled first-order optimizers over named torch parameters.

Written out explicitly (rather than wrapping a framework optimizer) so the
full optimizer state round-trips through flat numpy arrays and checkpoint
resume reproduces an uninterrupted run bit-for-bit.
"""

import numpy as np
import torch


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(
        self,
        named_params: dict,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}

    @torch.no_grad()
    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            grad = p.grad
            if grad is None:
                continue
            self.m[name].mul_(b1).add_(grad, alpha=1.0 - b1)
            self.v[name].mul_(b2).addcmul_(grad, grad, value=1.0 - b2)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            # Decay is decoupled from the moment estimates so its strength
            # is not renormalized away by the adaptive denominator.
            if self.weight_decay:
                p.mul_(1.0 - self.lr * self.weight_decay)
            p.add_(-self.lr * m_hat / (v_hat.sqrt() + self.eps))

    def state_arrays(self) -> dict:
        out = {"adam_step": np.array(self.step_count)}
        for name in self.params:
            out[f"adam_m__{name}"] = self.m[name].numpy().copy()
            out[f"adam_v__{name}"] = self.v[name].numpy().copy()
        return out

    def load_state_arrays(self, arrays: dict):
        self.step_count = int(arrays["adam_step"])
        for name in self.params:
            self.m[name] = torch.from_numpy(np.array(arrays[f"adam_m__{name}"]))
            self.v[name] = torch.from_numpy(np.array(arrays[f"adam_v__{name}"]))
        return self


class SGD:
    """Plain momentum SGD fallback."""

    def __init__(self, named_params: dict, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = dict(named_params)
        self.lr, self.momentum = lr, momentum
        self.weight_decay = weight_decay
        self.step_count = 0
        self.velocity = {k: torch.zeros_like(p) for k, p in self.params.items()}

    @torch.no_grad()
    def step(self):
        self.step_count += 1
        for name, p in self.params.items():
            grad = p.grad
            if grad is None:
                continue
            self.velocity[name].mul_(self.momentum).add_(grad)
            if self.weight_decay:
                p.mul_(1.0 - self.lr * self.weight_decay)
            p.add_(self.velocity[name], alpha=-self.lr)

    def state_arrays(self) -> dict:
        out = {"sgd_step": np.array(self.step_count)}
        for name in self.params:
            out[f"sgd_vel__{name}"] = self.velocity[name].numpy().copy()
        return out

    def load_state_arrays(self, arrays: dict):
        self.step_count = int(arrays["sgd_step"])
        for name in self.params:
            self.velocity[name] = torch.from_numpy(np.array(arrays[f"sgd_vel__{name}"]))
        return self


def make_optimizer(name: str, named_params: dict, lr: float, **kwargs):
    if name == "adam":
        return Adam(named_params, lr, **kwargs)
    if name == "sgd":
        allowed = ("momentum", "weight_decay")
        return SGD(named_params, lr, **{k: v for k, v in kwargs.items() if k in allowed})
    raise ValueError(f"unknown optimizer {name!r}; expected 'adam' or 'sgd'")
