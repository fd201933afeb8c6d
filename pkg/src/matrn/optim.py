"""Adam with bias correction, plus the step-decay learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter


class Adam:
    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params: list[Parameter] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t, dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m.copy()
            out[f"v.{i}"] = v.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if len([k for k in state if k.startswith("m.")]) != len(self.params):
            raise ValueError("optimizer state does not match the parameter list")
        self.t = int(np.asarray(state["t"]).reshape(-1)[0])
        for i, p in enumerate(self.params):
            m, v = np.asarray(state[f"m.{i}"]), np.asarray(state[f"v.{i}"])
            if m.shape != p.shape or v.shape != p.shape:
                raise ValueError(f"optimizer moment {i} has shape {m.shape}, parameter has {p.shape}")
            self.m[i] = m.astype(p.dtype, copy=True)
            self.v[i] = v.astype(p.dtype, copy=True)

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / c1
            v_hat = v / c2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              state: Adam | None = None) -> Adam:
    """Functional entry point: one Adam update, returning the optimizer state."""
    if state is None:
        state = Adam(params, lr=lr, betas=(beta1, beta2), eps=eps)
    state.lr = lr
    state.step()
    return state


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def step_decay_lr(base_lr: float, epoch: int, decay_epoch: int, factor: float = 0.1) -> float:
    """``base_lr`` until ``decay_epoch`` (0-based), then ``base_lr * factor``."""
    return base_lr * factor if decay_epoch >= 0 and epoch >= decay_epoch else base_lr
