"""Recurrent cells, embeddings, attention, and the vocabulary projection.

These are the building blocks the encoder and all decoders are assembled
from. Forward functions return ``(output, cache)``; each paired
``*_backward`` consumes the cache plus upstream gradients, accumulates
parameter gradients into the owning ParamSlots, and returns gradients for
the inputs. Layers are immutable during inference and may be shared
across threads; training mutates ParamSlot gradients single-threaded.

Conventions pinned here (tests rely on them):

* LSTM gate order along the last weight axis is (input, forget, output,
  candidate), so the three sigmoid gates are contiguous; new cell =
  f*c + i*g, new hidden = o*tanh(cell).
* GRU gate order is (update, reset, candidate); the candidate recurrent
  term uses ``reset * h_prev`` and the new hidden is
  ``(1 - z) * h_prev + z * h_cand``. The ``cell`` half of RnnState stays zero.
* Weight matrices are stored (input_width, output_width) and applied as
  ``x @ W``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import DomainError
from .tensor import Array, ParamSlot


@dataclass
class RnnState:
    """Recurrent state: hidden plus cell; the cell half is zero for GRU."""

    hidden: Array
    cell: Array

    @classmethod
    def zero(cls, width: int) -> "RnnState":
        return cls(T.zeros(width), T.zeros(width))


@dataclass
class EmbeddingTable:
    """Token embedding rows; lookup gradients scatter into a single row."""

    matrix: ParamSlot  # (vocab_size, emb_size)

    @property
    def vocab_size(self) -> int:
        return self.matrix.value.shape[0]

    @property
    def emb_size(self) -> int:
        return self.matrix.value.shape[1]

    def lookup(self, token_id: int) -> Array:
        # Returns a row view; forward passes never mutate it.
        if not 0 <= token_id < self.vocab_size:
            raise IndexError(f"token id {token_id} outside vocabulary of size {self.vocab_size}")
        return self.matrix.value[token_id]

    def lookup_backward(self, token_id: int, grad: Array) -> None:
        self.matrix.grad[token_id] += grad


@dataclass
class LstmParams:
    w_in: ParamSlot   # (d_in, 4*d_h)
    w_rec: ParamSlot  # (d_h, 4*d_h)
    bias: ParamSlot   # (4*d_h,)

    @property
    def hidden_size(self) -> int:
        return self.w_rec.value.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_in.value.shape[0]

    def slots(self) -> list[ParamSlot]:
        return [self.w_in, self.w_rec, self.bias]


@dataclass
class GruParams:
    w_in: ParamSlot   # (d_in, 3*d_h)
    w_rec: ParamSlot  # (d_h, 3*d_h)
    bias: ParamSlot   # (3*d_h,)

    @property
    def hidden_size(self) -> int:
        return self.w_rec.value.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_in.value.shape[0]

    def slots(self) -> list[ParamSlot]:
        return [self.w_in, self.w_rec, self.bias]


CellParams = LstmParams | GruParams


class LstmCache(NamedTuple):
    x: Array
    prev: RnnState
    i: Array
    f: Array
    g: Array
    o: Array
    cell: Array
    tanh_cell: Array


def lstm_step(params: LstmParams, x: Array, prev: RnnState) -> tuple[RnnState, LstmCache]:
    d_h = params.hidden_size
    z = T.matmul(x, params.w_in.value) + T.matmul(prev.hidden, params.w_rec.value) + params.bias.value
    gates = T.sigmoid(z[:3 * d_h])
    i = gates[:d_h]
    f = gates[d_h:2 * d_h]
    o = gates[2 * d_h:]
    g = T.tanh(z[3 * d_h:])
    cell = f * prev.cell + i * g
    tanh_cell = T.tanh(cell)
    hidden = o * tanh_cell
    return RnnState(hidden, cell), LstmCache(x, prev, i, f, g, o, cell, tanh_cell)


def lstm_step_backward(
    params: LstmParams, cache: LstmCache, d_hidden: Array, d_cell: Array
) -> tuple[Array, Array, Array]:
    """Return (d_x, d_prev_hidden, d_prev_cell); parameter grads accumulate."""
    d_o = d_hidden * cache.tanh_cell
    d_c = d_cell + T.tanh_backward(d_hidden * cache.o, cache.tanh_cell)
    d_f = d_c * cache.prev.cell
    d_prev_cell = d_c * cache.f
    d_i = d_c * cache.g
    d_g = d_c * cache.i
    d_z = np.concatenate([
        T.sigmoid_backward(d_i, cache.i),
        T.sigmoid_backward(d_f, cache.f),
        T.sigmoid_backward(d_o, cache.o),
        T.tanh_backward(d_g, cache.g),
    ])
    params.w_in.grad += np.outer(cache.x, d_z)
    params.w_rec.grad += np.outer(cache.prev.hidden, d_z)
    params.bias.grad += d_z
    d_x = d_z @ params.w_in.value.T
    d_prev_hidden = d_z @ params.w_rec.value.T
    return d_x, d_prev_hidden, d_prev_cell


class GruCache(NamedTuple):
    x: Array
    prev_hidden: Array
    z: Array
    r: Array
    cand: Array
    r_h: Array


def gru_step(params: GruParams, x: Array, prev: RnnState) -> tuple[RnnState, GruCache]:
    d_h = params.hidden_size
    gates_in = T.matmul(x, params.w_in.value) + params.bias.value
    rec = T.matmul(prev.hidden, params.w_rec.value[:, :2 * d_h])
    zr = T.sigmoid(gates_in[:2 * d_h] + rec)
    z = zr[:d_h]
    r = zr[d_h:]
    r_h = r * prev.hidden
    cand = T.tanh(gates_in[2 * d_h:] + T.matmul(r_h, params.w_rec.value[:, 2 * d_h:]))
    hidden = (1.0 - z) * prev.hidden + z * cand
    return RnnState(hidden, T.zeros(d_h)), GruCache(x, prev.hidden, z, r, cand, r_h)


def gru_step_backward(
    params: GruParams, cache: GruCache, d_hidden: Array, d_cell: Array
) -> tuple[Array, Array, Array]:
    """Return (d_x, d_prev_hidden, d_prev_cell); d_cell is ignored (GRU has none)."""
    d_h = params.hidden_size
    d_z = d_hidden * (cache.cand - cache.prev_hidden)
    d_prev_hidden = d_hidden * (1.0 - cache.z)
    d_cand_pre = T.tanh_backward(d_hidden * cache.z, cache.cand)
    d_r_h = d_cand_pre @ params.w_rec.value[:, 2 * d_h:].T
    d_r = d_r_h * cache.prev_hidden
    d_prev_hidden = d_prev_hidden + d_r_h * cache.r
    d_z_pre = T.sigmoid_backward(d_z, cache.z)
    d_r_pre = T.sigmoid_backward(d_r, cache.r)
    d_gates = np.concatenate([d_z_pre, d_r_pre, d_cand_pre])
    params.w_in.grad += np.outer(cache.x, d_gates)
    params.bias.grad += d_gates
    params.w_rec.grad[:, :2 * d_h] += np.outer(cache.prev_hidden, np.concatenate([d_z_pre, d_r_pre]))
    params.w_rec.grad[:, 2 * d_h:] += np.outer(cache.r_h, d_cand_pre)
    d_x = d_gates @ params.w_in.value.T
    d_prev_hidden = d_prev_hidden + np.concatenate([d_z_pre, d_r_pre]) @ params.w_rec.value[:, :2 * d_h].T
    return d_x, d_prev_hidden, T.zeros(d_h)


def cell_step(params: CellParams, x: Array, prev: RnnState):
    if isinstance(params, LstmParams):
        return lstm_step(params, x, prev)
    return gru_step(params, x, prev)


def cell_step_backward(params: CellParams, cache, d_hidden: Array, d_cell: Array):
    if isinstance(params, LstmParams):
        return lstm_step_backward(params, cache, d_hidden, d_cell)
    return gru_step_backward(params, cache, d_hidden, d_cell)


@dataclass
class AttentionParams:
    """Concatenation attention; per-decoder instances are never shared."""

    w: ParamSlot  # (2*d_h, attn_size)
    b: ParamSlot  # (attn_size,)
    v: ParamSlot  # (attn_size,)

    def slots(self) -> list[ParamSlot]:
        return [self.w, self.b, self.v]


class AttentionCache(NamedTuple):
    hiddens: Array  # (m, d_h)
    paired: Array   # (m, 2*d_h): each hidden concatenated with the query
    pre: Array      # (m, attn_size), tanh output
    weights: Array  # (m,)


def attention_context(
    params: AttentionParams, encoder_hiddens: Array, query: Array
) -> tuple[Array, Array, AttentionCache]:
    """Score each encoder hidden against the previous decoder state.

    score_i = v . tanh(W^T (h_i ++ query) + b); weights = softmax(scores);
    context = sum_i weights_i * h_i. Returns (context, weights, cache).
    """
    hiddens = np.asarray(encoder_hiddens, dtype=np.float64)
    if hiddens.ndim != 2 or hiddens.shape[0] == 0:
        raise DomainError("attention requires at least one encoder hidden vector")
    m, d_h = hiddens.shape
    paired = np.empty((m, 2 * d_h))
    paired[:, :d_h] = hiddens
    paired[:, d_h:] = query
    pre = T.tanh(paired @ params.w.value + params.b.value)  # (m, attn_size)
    scores = pre @ params.v.value                           # (m,)
    weights = T.softmax(scores)
    context = weights @ hiddens
    return context, weights, AttentionCache(hiddens, paired, pre, weights)


def attention_backward(
    params: AttentionParams, cache: AttentionCache, d_context: Array
) -> tuple[Array, Array]:
    """Return (d_encoder_hiddens, d_query); parameter grads accumulate."""
    d_weights = cache.hiddens @ d_context
    d_hiddens = np.outer(cache.weights, d_context)
    d_scores = T.softmax_backward(d_weights, cache.weights)
    params.v.grad += cache.pre.T @ d_scores
    d_pre = T.tanh_backward(np.outer(d_scores, params.v.value), cache.pre)
    d_paired = d_pre @ params.w.value.T
    params.w.grad += cache.paired.T @ d_pre
    params.b.grad += d_pre.sum(axis=0)
    d_h = cache.hiddens.shape[1]
    d_hiddens += d_paired[:, :d_h]
    d_query = d_paired[:, d_h:].sum(axis=0)
    return d_hiddens, d_query


@dataclass
class OutputProjection:
    u: ParamSlot  # (d_h, vocab_size)
    a: ParamSlot  # (vocab_size,)

    @property
    def vocab_size(self) -> int:
        return self.a.value.shape[0]

    def slots(self) -> list[ParamSlot]:
        return [self.u, self.a]


class ProjectionCache(NamedTuple):
    state: Array
    probs: Array


def project_to_vocab(proj: OutputProjection, state: Array) -> tuple[Array, ProjectionCache]:
    """softmax(U^T state + a): the per-step distribution over the vocabulary."""
    probs = T.softmax(T.matmul(state, proj.u.value) + proj.a.value)
    return probs, ProjectionCache(state, probs)


def project_backward(proj: OutputProjection, cache: ProjectionCache, d_probs: Array) -> Array:
    d_logits = T.softmax_backward(d_probs, cache.probs)
    proj.u.grad += np.outer(cache.state, d_logits)
    proj.a.grad += d_logits
    return d_logits @ proj.u.value.T
