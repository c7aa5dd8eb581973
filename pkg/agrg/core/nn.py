# agrg/core/nn.py

"""
Parameter containers built on the autodiff engine.

A `Module` discovers its parameters by walking its attributes (tensor attributes, child
modules, lists of child modules), so parameter names are
stable dotted paths such as `blocks.0.attention.w_q`. Those names key checkpoints
and freeze digests.
"""

import math
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from agrg.core.autodiff import Tensor, bias_add, embedding, layer_norm, matmul
from agrg.errors import ConfigError, ShapeError
from agrg.ingestion.common_utils import digest_arrays


def snap_float32(values: np.ndarray) -> np.ndarray:
    """Rounds to the nearest float32 value, kept in float64 storage."""
    return np.asarray(values, dtype=np.float32).astype(np.float64)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Tuple[int, ...]) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return snap_float32(rng.uniform(-limit, limit, size=shape))


def parameter(values: np.ndarray, name: Optional[str] = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


class Module:
    """Base class: parameter discovery, state dicts, freezing."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                if value.name is None:
                    value.name = path
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{path}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{path}.{index}.")

    def parameters(self) -> List[Tensor]:
        return [param for _, param in self.named_parameters()]

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.grad = None

    def freeze(self) -> "Module":
        """Stops gradient flow into every parameter of this module."""
        for param in self.parameters():
            param.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for param in self.parameters():
            param.requires_grad = True
        return self

    def snap_float32(self) -> None:
        for param in self.parameters():
            param.data[...] = snap_float32(param.data)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = "") -> None:
        for name, param in self.named_parameters():
            key = f"{prefix}{name}"
            if key not in state:
                raise ConfigError(f"checkpoint has no tensor named '{key}'")
            values = np.asarray(state[key], dtype=np.float64)
            if values.shape != param.shape:
                raise ShapeError(f"tensor '{key}' has shape {values.shape}, model expects {param.shape}")
            param.data[...] = values


def parameter_digest(named_params: Iterable[Tuple[str, Tensor]]) -> str:
    """SHA-256 over float32 parameter buffers in name order."""
    ordered = sorted(named_params, key=lambda item: item[0])
    return digest_arrays((name, param.data) for name, param in ordered)

# ==============================================================================
# LAYERS
# ==============================================================================

class Linear(Module):
    """y = x W + b with W of shape (in, out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        shape = (in_features, out_features)
        weights = np.zeros(shape) if zero_init else glorot_uniform(rng, in_features, out_features, shape)
        self.weight = parameter(weights)
        self.bias = parameter(np.zeros(out_features)) if bias else None
        self.in_features = in_features
        self.out_features = out_features

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects last axis {self.in_features}, got {x.shape}")
        out = matmul(x, self.weight) if x.ndim >= 2 else matmul(x.reshape(1, -1), self.weight).reshape(-1)
        return bias_add(out, self.bias) if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator):
        self.table = parameter(glorot_uniform(rng, num_embeddings, dim, (num_embeddings, dim)))

    def forward(self, ids: np.ndarray) -> Tensor:
        return embedding(self.table, ids)
