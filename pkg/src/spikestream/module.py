"""Parameter containers.

A :class:`Module` owns its tensors as plain attributes; parameters and
batch-norm running statistics are discovered by walking attributes in
insertion order, which keeps state-dict names and ordering stable.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import BatchNormState, Tensor


class Module:
    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, BatchNormState):
                yield f"{name}.gain", val.gain
                yield f"{name}.offset", val.offset
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_norms(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, BatchNormState):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_norms(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_norms(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, bn in self.named_norms():
            state[f"{name}.running_mean"] = np.array(bn.running_mean, dtype=np.float64)
            state[f"{name}.running_var"] = np.array(bn.running_var, dtype=np.float64)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)
        for name, bn in self.named_norms():
            bn.running_mean = np.array(state[f"{name}.running_mean"], dtype=np.float64)
            bn.running_var = np.array(state[f"{name}.running_var"], dtype=np.float64)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)
