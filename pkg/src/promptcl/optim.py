"""Bias-corrected Adam over named parameter groups with trainability masks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, lr: float,
              beta1: float, beta2: float, eps: float, step: int, mask: np.ndarray | None = None) -> None:
    """One in-place Adam update of ``param``, ``m`` and ``v``.

    Entries where ``mask`` is False keep their value and moments untouched.
    """
    if step < 1:
        raise ValueError("step count starts at 1")
    if mask is not None:
        grad = np.where(mask, grad, 0.0)
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    if mask is not None:
        update = np.where(mask, update, 0.0)
    param -= update


@dataclass
class ParamGroup:
    name: str
    lr: float
    params: dict[str, Tensor] = field(default_factory=dict)


class Adam:
    """Single optimizer instance holding several learning-rate groups."""

    def __init__(self, groups: list[ParamGroup], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, masks: dict[str, np.ndarray] | None = None):
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.masks = dict(masks or {})
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        seen = set()
        for g in groups:
            for name, p in g.params.items():
                if name in seen:
                    raise ValueError(f"parameter {name} appears in two groups")
                seen.add(name)
                if not p.requires_grad:
                    raise ValueError(f"parameter {name} does not require grad")
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def named_params(self) -> dict[str, Tensor]:
        return {name: p for g in self.groups for name, p in g.params.items()}

    def zero_grad(self) -> None:
        for p in self.named_params().values():
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        for g in self.groups:
            for name, p in g.params.items():
                adam_step(p.data, p.grad, self.m[name], self.v[name], g.lr,
                          self.beta1, self.beta2, self.eps, self.step_count, self.masks.get(name))

    def group(self, name: str) -> ParamGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.m:
            self.m[name] = arrays[f"adam.m.{name}"].copy()
            self.v[name] = arrays[f"adam.v.{name}"].copy()
        self.step_count = step_count
