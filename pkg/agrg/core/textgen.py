# agrg/core/textgen.py

"""
Conditioned causal language model.

A word-level vocabulary over the report grammar, a small pre-norm transformer
decoder whose self-attention carries one extra key/value slot computed from the
conditioning vector e (pseudo self-attention), next-token training, and beam search
decoding from [BOS].
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from agrg.core.autodiff import (
    Graph, Tensor, concat, cross_entropy, gelu, gradients, matmul, no_grad, softmax, swapaxes,
)
from agrg.core.nn import Embedding, LayerNorm, Linear, Module, glorot_uniform, parameter
from agrg.core.optim import Adam
from agrg.errors import ConfigError, FrozenParameterError, ShapeError
from agrg.ingestion.common_utils import join_words, word_tokenize

logger = logging.getLogger(__name__)

SPECIAL_TOKENS: Tuple[str, ...] = ("[BOS]", "[EOS]", "[PAD]", "[UNK]")
BOS, EOS, PAD, UNK = range(len(SPECIAL_TOKENS))


class DecoderConfig(BaseModel):
    layers: int = Field(2, ge=1)
    heads: int = Field(2, ge=1)
    d_t: int = Field(64, ge=1)
    max_positions: int = Field(64, ge=2)
    max_gen_len: int = Field(60, ge=1)
    beam: int = Field(4, ge=1)
    length_alpha: float = Field(0.0, ge=0.0)

    @model_validator(mode="after")
    def check_dimensions(self) -> "DecoderConfig":
        if self.d_t % self.heads:
            raise ConfigError(f"d_t={self.d_t} is not divisible by heads={self.heads}")
        if self.max_gen_len + 1 > self.max_positions:
            raise ConfigError(f"max_gen_len={self.max_gen_len} needs max_positions > {self.max_gen_len}")
        return self

# ==============================================================================
# 1. VOCABULARY
# ==============================================================================

@dataclass(frozen=True)
class Vocabulary:
    """Specials first ([BOS]=0, [EOS]=1, [PAD]=2, [UNK]=3), then words in first-appearance order."""
    tokens: Tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ConfigError("vocabulary must start with [BOS], [EOS], [PAD], [UNK]")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary tokens must be unique")
        object.__setattr__(self, "_ids", {token: i for i, token in enumerate(self.tokens)})

    @classmethod
    def build(cls, corpus: Iterable[str]) -> "Vocabulary":
        words: Dict[str, None] = {}
        for text in corpus:
            for word in word_tokenize(text):
                words.setdefault(word, None)
        return cls(SPECIAL_TOKENS + tuple(word for word in words if word not in SPECIAL_TOKENS))

    @classmethod
    def from_lines(cls, block: str) -> "Vocabulary":
        return cls(tuple(block.split("\n")))

    def to_lines(self) -> str:
        return "\n".join(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, word: str) -> int:
        return self._ids.get(word, UNK)


def tokenize(text: str, vocab: Vocabulary) -> List[int]:
    """Word ids of `text` without [BOS]/[EOS]; unknown words map to [UNK]."""
    return [vocab.id_of(word) for word in word_tokenize(text)]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Text of `ids`; stops at [EOS] and drops [BOS]/[PAD]."""
    words = []
    for token in ids:
        token = int(token)
        if token == EOS:
            break
        if token in (BOS, PAD):
            continue
        words.append(vocab.tokens[token])
    return join_words(words)

# ==============================================================================
# 2. PSEUDO SELF-ATTENTION DECODER
# ==============================================================================

def causal_slot_mask(length: int) -> np.ndarray:
    """(T, T+1) visibility: the conditioning slot always, token slots 0..t for query t."""
    return np.concatenate([np.ones((length, 1), dtype=bool), np.tril(np.ones((length, length), dtype=bool))], axis=1)


class PSAttention(Module):
    """
    Multi-head causal self-attention with one prepended conditioning slot.

    Per head, query t attends over [e·w_k ; Y_0..t·W_k] with values [e·w_v ; Y_0..t·W_v],
    scores scaled by 1/sqrt(d_head).
    """

    def __init__(self, d_t: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.d_head = d_t // heads
        self.w_q = parameter(glorot_uniform(rng, d_t, d_t, (d_t, d_t)))
        self.w_k = parameter(glorot_uniform(rng, d_t, d_t, (d_t, d_t)))
        self.w_v = parameter(glorot_uniform(rng, d_t, d_t, (d_t, d_t)))
        self.cond_k = parameter(glorot_uniform(rng, d_t, d_t, (d_t, d_t)))
        self.cond_v = parameter(glorot_uniform(rng, d_t, d_t, (d_t, d_t)))
        self.out = Linear(d_t, d_t, rng)

    def _split(self, x: Tensor) -> Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.heads, self.d_head).transpose(0, 2, 1, 3)

    def forward(self, e: Tensor, y: Tensor, return_weights: bool = False):
        if y.ndim != 3 or e.ndim != 2 or e.shape[0] != y.shape[0] or e.shape[1] != y.shape[2]:
            raise ShapeError(f"pseudo self-attention got e {e.shape} and Y {y.shape}")
        batch, length, width = y.shape
        if length < 1:
            raise ShapeError("pseudo self-attention needs at least one token")

        q = self._split(matmul(y, self.w_q))
        keys = concat([self._split(matmul(e, self.cond_k).reshape(batch, 1, width)),
                       self._split(matmul(y, self.w_k))], axis=2)
        values = concat([self._split(matmul(e, self.cond_v).reshape(batch, 1, width)),
                         self._split(matmul(y, self.w_v))], axis=2)
        scores = matmul(q, swapaxes(keys, -1, -2)) * (1.0 / math.sqrt(self.d_head))
        weights = softmax(scores, axis=-1, mask=causal_slot_mask(length))
        mixed = matmul(weights, values).transpose(0, 2, 1, 3).reshape(batch, length, width)
        output = self.out(mixed)
        return (output, weights) if return_weights else output


def pseudo_self_attention(e: Tensor, y: Tensor, layer: PSAttention) -> Tensor:
    """Single-sequence form: e (d_t,), Y (T, d_t) -> (T, d_t)."""
    return layer(e.reshape(1, -1), y.reshape(1, *y.shape)).reshape(*y.shape)


class DecoderBlock(Module):
    def __init__(self, d_t: int, heads: int, rng: np.random.Generator):
        self.attn_norm = LayerNorm(d_t)
        self.attention = PSAttention(d_t, heads, rng)
        self.ff_norm = LayerNorm(d_t)
        self.ff_in = Linear(d_t, 4 * d_t, rng)
        self.ff_out = Linear(4 * d_t, d_t, rng)

    def forward(self, e: Tensor, x: Tensor) -> Tensor:
        x = x + self.attention(e, self.attn_norm(x))
        return x + self.ff_out(gelu(self.ff_in(self.ff_norm(x))))


class TextDecoder(Module):
    """Token + learned position embeddings, PS-attention blocks, final norm, vocabulary readout."""

    def __init__(self, config: DecoderConfig, vocab_size: int, rng: np.random.Generator):
        self.max_positions = config.max_positions
        self.token_embed = Embedding(vocab_size, config.d_t, rng)
        self.position_embed = Embedding(config.max_positions, config.d_t, rng)
        self.blocks = [DecoderBlock(config.d_t, config.heads, rng) for _ in range(config.layers)]
        self.norm = LayerNorm(config.d_t)
        # zero readout: uniform next-token distribution at initialization
        self.lm_head = Linear(config.d_t, vocab_size, rng, zero_init=True)

    def forward(self, e: Tensor, ids: np.ndarray) -> Tensor:
        """e (B, d_t), ids (B, T) -> logits (B, T, |V|)."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        length = ids.shape[1]
        if length > self.max_positions:
            raise ShapeError(f"sequence of {length} tokens exceeds {self.max_positions} positions")
        x = self.token_embed(ids) + self.position_embed(np.arange(length))
        for block in self.blocks:
            x = block(e, x)
        return self.lm_head(self.norm(x))


def decode_forward(decoder: TextDecoder, e: np.ndarray, ids: Sequence[int]) -> np.ndarray:
    """Next-token logits (T, |V|) for one conditioning vector and one token sequence."""
    with no_grad():
        return decoder(Tensor(np.asarray(e).reshape(1, -1)), np.asarray(ids)[None]).data[0]

# ==============================================================================
# 3. TRAINING
# ==============================================================================

def teacher_forcing_batch(sentences: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    """Inputs [BOS] w_1..w_n and targets w_1..w_n [EOS], right-padded with [PAD]."""
    length = max(len(tokens) for tokens in sentences) + 1
    inputs = np.full((len(sentences), length), PAD, dtype=np.int64)
    targets = np.full((len(sentences), length), PAD, dtype=np.int64)
    for row, tokens in enumerate(sentences):
        inputs[row, :len(tokens) + 1] = [BOS, *tokens]
        targets[row, :len(tokens) + 1] = [*tokens, EOS]
    return inputs, targets


def sentence_nll(decoder: TextDecoder, e: Tensor, sentences: Sequence[Sequence[int]]) -> Tensor:
    """Mean next-token NLL over every non-pad target position of the batch."""
    inputs, targets = teacher_forcing_batch(sentences)
    logits = decoder(e, inputs)
    return cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=PAD)


def train_decoder_step(decoder: TextDecoder, projector: Module, batch: Sequence[Tuple[np.ndarray, Sequence[int]]],
                       optimizer: Adam, frozen: Sequence[Tensor] = ()) -> float:
    """
    One teacher-forced update on (projector input, sentence token ids) pairs.

    Upstream features arrive as plain arrays, so no gradient can reach the encoder or
    the heads; `frozen` lists parameters that must stay untouched regardless.
    """
    features = np.stack([np.asarray(item[0], dtype=np.float64) for item in batch])
    sentences = [list(item[1]) for item in batch]
    for _, param in optimizer.params:
        param.grad = None
    with Graph() as graph:
        loss = sentence_nll(decoder, projector(Tensor(features)), sentences)
    grads = gradients(graph, loss)

    frozen_ids = {id(param) for param in frozen}
    leaked = [leaf.name or repr(leaf) for leaf in grads if id(leaf) in frozen_ids]
    if leaked or any(param.grad is not None for param in frozen):
        raise FrozenParameterError(f"gradient reached frozen parameters: {leaked}")
    optimizer.step()
    return loss.item()

# ==============================================================================
# 4. DECODING
# ==============================================================================

@dataclass(frozen=True)
class BeamHypothesis:
    tokens: Tuple[int, ...]
    score: float
    finished: bool = False

    def normalized(self, alpha: float) -> float:
        return self.score / (max(1, len(self.tokens)) ** alpha) if alpha else self.score

    def words(self) -> Tuple[int, ...]:
        """Generated ids without the closing [EOS]."""
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS else self.tokens


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def next_token_log_probs(decoder: TextDecoder, e: np.ndarray, prefixes: Sequence[Tuple[int, ...]]) -> np.ndarray:
    """Log-probabilities (n, |V|) of the token following [BOS]+prefix, for equal-length prefixes."""
    ids = np.array([[BOS, *prefix] for prefix in prefixes], dtype=np.int64)
    conditioning = np.repeat(np.asarray(e, dtype=np.float64).reshape(1, -1), len(prefixes), axis=0)
    with no_grad():
        logits = decoder(Tensor(conditioning), ids).data[:, -1, :]
    return _log_softmax(logits)


def allowed_tokens(vocab_size: int) -> np.ndarray:
    """Ids eligible for generation: everything except [PAD] and [BOS]."""
    return np.array([token for token in range(vocab_size) if token not in (PAD, BOS)], dtype=np.int64)


def _ranking_key(score: float, tokens: Tuple[int, ...]):
    return (-score, len(tokens), tokens)


def beam_search(decoder: TextDecoder, e: np.ndarray, beam: int = 4, max_len: int = 60,
                alpha: float = 0.0) -> BeamHypothesis:
    """
    Beam search from [BOS] over cumulative log-probabilities.

    Each step expands every live hypothesis, keeps the `beam` best candidates, and
    shelves those ending in [EOS] or reaching `max_len`. The result is the finished
    hypothesis with the best score / length**alpha; ties go to the shorter sequence,
    then to the lexicographically smaller ids.
    """
    if beam < 1:
        raise ValueError(f"beam must be at least 1, got {beam}")
    max_len = min(max_len, decoder.max_positions)
    vocab_size = decoder.lm_head.out_features
    candidates_ids = allowed_tokens(vocab_size)

    live = [BeamHypothesis((), 0.0)]
    finished: List[BeamHypothesis] = []
    while live:
        log_probs = next_token_log_probs(decoder, e, [hyp.tokens for hyp in live])
        candidates = [(hyp.score + float(row[token]), hyp.tokens + (int(token),))
                      for hyp, row in zip(live, log_probs) for token in candidates_ids]
        candidates.sort(key=lambda item: _ranking_key(*item))

        live = []
        for score, tokens in candidates[:beam]:
            done = tokens[-1] == EOS or len(tokens) >= max_len
            (finished if done else live).append(BeamHypothesis(tokens, score, done))

        # log-probabilities only decrease, so no live hypothesis can overtake
        if alpha == 0.0 and live and finished and max(h.score for h in finished) >= max(h.score for h in live):
            break

    return min(finished, key=lambda hyp: (-hyp.normalized(alpha), len(hyp.tokens), hyp.tokens))


def greedy_decode(decoder: TextDecoder, e: np.ndarray, max_len: int = 60) -> BeamHypothesis:
    """Argmax decoding (lowest id on ties), the beam=1 special case."""
    max_len = min(max_len, decoder.max_positions)
    candidates_ids = allowed_tokens(decoder.lm_head.out_features)
    tokens: Tuple[int, ...] = ()
    score = 0.0
    while True:
        row = next_token_log_probs(decoder, e, [tokens])[0]
        best = int(candidates_ids[np.argmax(row[candidates_ids])])
        tokens += (best,)
        score += float(row[best])
        if best == EOS or len(tokens) >= max_len:
            return BeamHypothesis(tokens, score, True)


def generate_sentence(decoder: TextDecoder, vocab: Vocabulary, e: np.ndarray, beam: int = 4,
                      max_len: int = 60, alpha: float = 0.0) -> str:
    return detokenize(beam_search(decoder, e, beam, max_len, alpha).words(), vocab)
