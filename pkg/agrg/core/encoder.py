# agrg/core/encoder.py

"""
Visual encoder and multi-label pre-training head.

The encoder cuts a preprocessed volume into non-overlapping cubic patches, embeds
each patch linearly, refines the patch tokens with residual per-token MLP blocks
and pools them into the shared feature vector h. The two encoder kinds differ in the
pooling: "mixer" takes the mean over patches, "attention" weights patches by a
learned softmax score. There are no positional embeddings, so h is invariant to
permutations of patches for both kinds. The pre-training head maps h to one logit
per label.
"""

import logging
from typing import List, Literal, Sequence

import numpy as np
from pydantic import BaseModel, Field

from agrg.core.autodiff import Graph, Tensor, bce_loss, gelu, gradients, no_grad, sigmoid, softmax
from agrg.core.nn import LayerNorm, Linear, Module
from agrg.core.optim import Adam
from agrg.errors import ConfigError, ShapeError
from agrg.ingestion.common_utils import iter_batches, make_rng, progress
from agrg.ingestion.synth import SyntheticCase

logger = logging.getLogger(__name__)

EncoderKind = Literal["mixer", "attention"]
ENCODER_KINDS = ("mixer", "attention")


class EncoderConfig(BaseModel):
    kind: EncoderKind = "mixer"
    patch: int = Field(8, ge=1)
    d_h: int = Field(128, ge=2)
    layers: int = Field(2, ge=0)

# ==============================================================================
# 1. PATCH TOKENS
# ==============================================================================

def patchify(volumes: np.ndarray, patch: int) -> np.ndarray:
    """(B, D, H, W) volumes -> (B, N, patch**3) patch tokens, patches in row-major order."""
    volumes = np.asarray(volumes, dtype=np.float64)
    if volumes.ndim == 3:
        volumes = volumes[None]
    if volumes.ndim != 4:
        raise ShapeError(f"expected (B, D, H, W) volumes, got shape {volumes.shape}")
    batch, depth, height, width = volumes.shape
    if depth % patch or height % patch or width % patch:
        raise ShapeError(f"volume shape {volumes.shape[1:]} is not divisible by patch size {patch}")
    grid = volumes.reshape(batch, depth // patch, patch, height // patch, patch, width // patch, patch)
    return grid.transpose(0, 1, 3, 5, 2, 4, 6).reshape(batch, -1, patch ** 3)

# ==============================================================================
# 2. MODULES
# ==============================================================================

class MixingBlock(Module):
    """Pre-norm residual MLP applied to every token independently."""

    def __init__(self, width: int, rng: np.random.Generator):
        self.norm = LayerNorm(width)
        self.expand = Linear(width, 2 * width, rng)
        self.contract = Linear(2 * width, width, rng)

    def forward(self, tokens: Tensor) -> Tensor:
        return tokens + self.contract(gelu(self.expand(self.norm(tokens))))


class AttentionPool(Module):
    """Softmax over patches of a learned per-token score, then the weighted sum of tokens."""

    def __init__(self, width: int, rng: np.random.Generator):
        self.score = Linear(width, 1, rng)

    def forward(self, tokens: Tensor) -> Tensor:
        weights = softmax(self.score(tokens), axis=1)
        return (weights * tokens).sum(axis=1)


class VisualEncoder(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        if config.d_h % 2:
            raise ConfigError(f"d_h must be even, got {config.d_h}")
        self.config = config
        self.patch_embed = Linear(config.patch ** 3, config.d_h, rng)
        self.blocks = [MixingBlock(config.d_h, rng) for _ in range(config.layers)]
        self.norm = LayerNorm(config.d_h)
        if config.kind == "attention":
            self.pool = AttentionPool(config.d_h, rng)

    def forward(self, volumes: np.ndarray) -> Tensor:
        """Returns h with shape (B, d_h)."""
        tokens = self.patch_embed(Tensor(patchify(volumes, self.config.patch)))
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)
        if self.config.kind == "attention":
            return self.pool(tokens)
        return tokens.mean(axis=1)


class MultiLabelHead(Module):
    """Single linear layer from h to K logits; sigmoid is applied by the loss."""

    def __init__(self, d_h: int, k: int, rng: np.random.Generator):
        self.linear = Linear(d_h, k, rng)

    def forward(self, h: Tensor) -> Tensor:
        return self.linear(h)


class PretrainModel(Module):
    def __init__(self, encoder_config: EncoderConfig, k: int, rng: np.random.Generator):
        self.encoder = VisualEncoder(encoder_config, rng)
        self.psi = MultiLabelHead(encoder_config.d_h, k, rng)

    def forward(self, volumes: np.ndarray) -> Tensor:
        return self.psi(self.encoder(volumes))

# ==============================================================================
# 3. OPERATIONS
# ==============================================================================

def encode_volume(volume: np.ndarray, encoder: VisualEncoder) -> np.ndarray:
    """h for one preprocessed volume, computed without recording a graph."""
    with no_grad():
        return encoder(volume).data[0]


def predict_multilabel(h: np.ndarray, head: MultiLabelHead) -> np.ndarray:
    """Raw logits for one or more feature vectors."""
    with no_grad():
        return head(Tensor(h)).data


def stack_batch(cases: Sequence[SyntheticCase]):
    volumes = np.stack([case.volume for case in cases]).astype(np.float64)
    labels = np.stack([case.labels for case in cases]).astype(np.float64)
    return volumes, labels


def batch_bce(model: PretrainModel, volumes: np.ndarray, labels: np.ndarray) -> Tensor:
    """Mean over samples and labels of BCE(sigmoid(head(encoder(x))), y)."""
    return bce_loss(sigmoid(model(volumes)), labels)


def pretrain_epoch(cases: Sequence[SyntheticCase], model: PretrainModel, optimizer: Adam,
                   batch_size: int = 4, seed: int = 0, epoch: int = 0) -> float:
    """
    One pass of multi-label pre-training over shuffled batches.

    Returns the epoch's mean BCE, each batch weighted by its number of cases (equal to
    the plain mean over batches when every batch is full).
    """
    if len(cases) == 0:
        raise ConfigError("cannot pre-train on an empty dataset")
    order = make_rng(seed, "pretrain-shuffle", epoch).permutation(len(cases))
    params = model.parameters()
    total, seen = 0.0, 0

    for indices in progress(list(iter_batches(order, batch_size)), desc=f"pretrain epoch {epoch}"):
        volumes, labels = stack_batch([cases[int(i)] for i in indices])
        for param in params:
            param.grad = None
        with Graph() as graph:
            loss = batch_bce(model, volumes, labels)
        gradients(graph, loss)
        optimizer.step()
        total += loss.item() * len(indices)
        seen += len(indices)
    return total / seen


def multilabel_scores(cases: Sequence[SyntheticCase], model: PretrainModel, batch_size: int = 16) -> np.ndarray:
    """Sigmoid scores (N, K) from the pre-training head, no graph recorded."""
    scores: List[np.ndarray] = []
    with no_grad():
        for batch in iter_batches(list(cases), batch_size):
            volumes, _ = stack_batch(batch)
            scores.append(sigmoid(model(volumes)).data)
    return np.concatenate(scores, axis=0)
