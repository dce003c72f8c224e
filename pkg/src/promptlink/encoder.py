"""Frozen text encoder: tokenizer, vocabulary, transformer stack with
per-layer prompt injection, and freeze-level control.

The stack ships fully frozen at random initialization; what trains by
default is everything *around* it (prompts, embeddings, projections,
scorer). Inputs to layer j at the first k positions are always that
layer's prompt vectors, overriding the previous layer's outputs there;
text positions enter layer 1 as word embeddings plus learned absolute
position encodings (prompt slots carry no position encoding).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

PAD, UNK, SEP = 0, 1, 2
_SPECIALS = ("[PAD]", "[UNK]", "[SEP]")

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text):
    """Lowercase and split on whitespace/punctuation into alnum runs."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token table with fixed special ids [PAD]=0, [UNK]=1, [SEP]=2."""

    def __init__(self):
        self.token_to_id = {s: i for i, s in enumerate(_SPECIALS)}
        self.tokens = list(_SPECIALS)

    def _add(self, tok):
        if tok not in self.token_to_id:
            self.token_to_id[tok] = len(self.tokens)
            self.tokens.append(tok)

    @classmethod
    def from_graph(cls, graph):
        """Deterministic build: first appearance over the text tables, then
        over fact timestamps (temporal graphs only, split order)."""
        v = cls()
        for rec in graph.entity_text:
            for tok in tokenize(rec.name) + tokenize(rec.description):
                v._add(tok)
        for rec in graph.relation_text:
            for tok in tokenize(rec.name) + tokenize(rec.description):
                v._add(tok)
        if graph.temporal:
            for fact in graph.all_facts():
                if fact.meta:
                    for tok in tokenize(fact.meta):
                        v._add(tok)
        return v

    def __len__(self):
        return len(self.tokens)

    def encode(self, toks):
        return [self.token_to_id.get(t, UNK) for t in toks]

    def dump(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.tokens):
                fh.write(f"{tok}\t{i}\n")


@dataclass
class QueryText:
    """Token ids for one query; prompt slots precede the text span."""
    token_ids: np.ndarray
    n_prompt: int = 0

    def __len__(self):
        return self.n_prompt + len(self.token_ids)


def build_query_tokens(graph, vocab, head, rel, meta=None, strategy="joint",
                       max_text_len=64):
    """Token ids for a KG query.

    joint:      name(h) + desc(h) + [SEP] + name(r) [+ timestamp tokens]
    separated:  (name(h) + desc(h),  name(r) [+ timestamp tokens])

    Truncation drops description tokens first so names survive. Empty
    text yields a single [UNK].
    """
    h_rec = graph.entity_text[head]
    r_rec = graph.relation_text[rel]
    h_name = vocab.encode(tokenize(h_rec.name))
    h_desc = vocab.encode(tokenize(h_rec.description))
    r_name = vocab.encode(tokenize(r_rec.name))
    meta_toks = vocab.encode(tokenize(meta)) if (graph.temporal and meta) else []
    if not h_name:
        h_name = [UNK]
    if not r_name:
        r_name = [UNK]

    if strategy == "joint":
        reserved = len(h_name) + 1 + len(r_name) + len(meta_toks)
        budget = max(0, max_text_len - reserved)
        ids = h_name + h_desc[:budget] + [SEP] + r_name + meta_toks
        ids = ids[:max_text_len]
        return np.asarray(ids, dtype=np.int64)
    if strategy == "separated":
        budget = max(0, max_text_len - len(h_name))
        h_ids = (h_name + h_desc[:budget])[:max_text_len]
        r_ids = (r_name + meta_toks)[:max_text_len]
        return np.asarray(h_ids, dtype=np.int64), np.asarray(r_ids, dtype=np.int64)
    raise ValueError(f"unknown strategy {strategy!r}")


def pad_token_batch(seqs):
    """Stack variable-length id sequences into a PAD-filled (B, T) matrix."""
    width = max(1, max(len(s) for s in seqs))
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


@dataclass
class FreezeSpec:
    direction: str = "bottom"   # which end of the stack the frozen block starts from
    count: int = -1             # frozen layer count; -1 = all
    word_embeddings: bool = True


class EncoderStack:
    """l transformer layers (post-norm, multi-head attention, ReLU FFN).

    Parameters are registered into `group` under `prefix`; the per-layer
    freeze partition is applied through the group so frozen weights never
    receive gradients or optimizer state. `forward_count` counts query
    rows encoded, the instrumented cost measure for the efficiency
    contract (one encoder pass per query, never per candidate).
    """

    def __init__(self, group, vocab_size, n_layers=4, hidden=64, n_heads=4,
                 max_text_len=64, dropout=0.0, residual_gain=0.25, rng=None,
                 prefix="encoder"):
        if hidden % n_heads:
            raise ValueError(f"head count {n_heads} must divide hidden size {hidden}")
        rng = rng or np.random.default_rng(0)
        self.group = group
        self.n_layers = n_layers
        self.hidden = hidden
        self.n_heads = n_heads
        self.max_text_len = max_text_len
        self.dropout = dropout
        self.prefix = prefix
        self.forward_count = 0
        self.vectors_injected = 0
        self._drop_rng = np.random.default_rng(rng.integers(2**63)) if dropout > 0 else None

        dt = T.get_default_dtype()

        def reg(name, arr):
            return group.register(f"{prefix}.{name}", Tensor(arr.astype(dt)), trainable=True)

        def xavier(fan_in, fan_out):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-a, a, size=(fan_in, fan_out))

        H = hidden
        self.word_emb = reg("word_emb", rng.normal(0.0, 0.02, size=(vocab_size, H)))
        self.pos_emb = reg("pos_emb", rng.normal(0.0, 0.02, size=(max_text_len, H)))
        self.layers = []
        # a frozen stack never adapts, so sublayer outputs are scaled down at
        # init to keep the residual stream (and with it the injected prompt
        # content) from being washed out by random mixing
        g_out = residual_gain
        for i in range(n_layers):
            p = f"layer{i}"
            layer = {
                "wq": reg(f"{p}.wq", xavier(H, H)), "bq": reg(f"{p}.bq", np.zeros(H)),
                "wk": reg(f"{p}.wk", xavier(H, H)), "bk": reg(f"{p}.bk", np.zeros(H)),
                "wv": reg(f"{p}.wv", xavier(H, H)), "bv": reg(f"{p}.bv", np.zeros(H)),
                "wo": reg(f"{p}.wo", g_out * xavier(H, H)), "bo": reg(f"{p}.bo", np.zeros(H)),
                "ln1_g": reg(f"{p}.ln1_g", np.ones(H)), "ln1_b": reg(f"{p}.ln1_b", np.zeros(H)),
                "w1": reg(f"{p}.w1", xavier(H, 4 * H)), "b1": reg(f"{p}.b1", np.zeros(4 * H)),
                "w2": reg(f"{p}.w2", g_out * xavier(4 * H, H)), "b2": reg(f"{p}.b2", np.zeros(H)),
                "ln2_g": reg(f"{p}.ln2_g", np.ones(H)), "ln2_b": reg(f"{p}.ln2_b", np.zeros(H)),
            }
            self.layers.append(layer)
        self.freeze = None
        set_freeze(self, "bottom", n_layers, freeze_word_embeddings=True)

    # -- freeze control ------------------------------------------------------

    def layer_param_names(self, i):
        return [n for n in self.group.names() if n.startswith(f"{self.prefix}.layer{i}.")]

    def embedding_param_names(self):
        return [f"{self.prefix}.word_emb", f"{self.prefix}.pos_emb"]

    # -- forward ---------------------------------------------------------------

    def _attention(self, layer, x, mask_bias, probe=None, idx=None):
        B, S, H = x.shape
        nh, hd = self.n_heads, H // self.n_heads

        def heads(t):
            return T.transpose(t.reshape(B, S, nh, hd), (0, 2, 1, 3))

        q = heads(x @ layer["wq"] + layer["bq"])
        k = heads(x @ layer["wk"] + layer["bk"])
        v = heads(x @ layer["wv"] + layer["bv"])
        scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
        if mask_bias is not None:
            scores = scores + mask_bias
        attn = T.softmax(scores, axis=-1)
        if probe is not None:
            probe.setdefault("attention", []).append(attn.data.copy())
        ctx = T.transpose(attn @ v, (0, 2, 1, 3)).reshape(B, S, H)
        return ctx @ layer["wo"] + layer["bo"]

    def _layer_forward(self, layer, x, mask_bias, probe=None):
        a = self._attention(layer, x, mask_bias, probe)
        if self.dropout > 0:
            a = T.dropout(a, self.dropout, self._drop_rng)
        x = T.layer_norm(x + a, layer["ln1_g"], layer["ln1_b"])
        f = T.relu(x @ layer["w1"] + layer["b1"]) @ layer["w2"] + layer["b2"]
        if self.dropout > 0:
            f = T.dropout(f, self.dropout, self._drop_rng)
        return T.layer_norm(x + f, layer["ln2_g"], layer["ln2_b"])

    def forward(self, prompts, tokens, mode="layerwise", probe=None):
        """Encode a (B, T) token batch under injected prompts.

        layerwise: prompts is (B, l, k, H); layer j's inputs at positions
        i <= k are its own prompt vectors, replacing whatever layer j-1
        produced there. input_only: prompts is (B, k', H), injected at
        layer 1 only and transformed normally afterwards.

        Returns last-layer states of shape (B, k + T, H).
        """
        B, Tlen = tokens.shape
        H = self.hidden
        if mode == "layerwise":
            if prompts.ndim != 4 or prompts.shape[1] != self.n_layers:
                raise ShapeError(
                    f"layerwise prompts must be (B, {self.n_layers}, k, {H}), got {prompts.shape}")
            k = prompts.shape[2]
        elif mode == "input_only":
            if prompts.ndim != 3:
                raise ShapeError(f"input-only prompts must be (B, k', {H}), got {prompts.shape}")
            k = prompts.shape[1]
        else:
            raise ValueError(f"unknown prompt mode {mode!r}")
        if prompts.shape[0] != B or prompts.shape[-1] != H:
            raise ShapeError(
                f"prompts {prompts.shape} do not match batch {B} / hidden {H}")
        if Tlen > self.max_text_len:
            raise ShapeError(f"text length {Tlen} exceeds maximum {self.max_text_len}")

        words = T.embedding(self.word_emb, tokens)
        pos = self.pos_emb[:Tlen].reshape(1, Tlen, H)
        x_text = words + pos

        # keys at PAD positions are masked out of every attention row
        pad = (tokens == PAD)
        bias = np.zeros((B, 1, 1, k + Tlen), dtype=x_text.data.dtype)
        bias[:, 0, 0, k:] = np.where(pad, -1e9, 0.0)
        mask_bias = T.constant(bias)

        if mode == "input_only":
            h = T.concat([prompts, x_text], axis=1)
            if probe is not None:
                probe.setdefault("layer_inputs", []).append(h.data.copy())
            for j, layer in enumerate(self.layers):
                h = self._layer_forward(layer, h, mask_bias, probe)
                if probe is not None and j + 1 < self.n_layers:
                    probe.setdefault("layer_inputs", []).append(h.data.copy())
            self.vectors_injected += k * B
        else:
            h = x_text
            for j, layer in enumerate(self.layers):
                layer_prompts = prompts[:, j]
                if j == 0:
                    h = T.concat([layer_prompts, h], axis=1)
                else:
                    h = T.concat([layer_prompts, h[:, k:, :]], axis=1)
                if probe is not None:
                    probe.setdefault("layer_inputs", []).append(h.data.copy())
                h = self._layer_forward(layer, h, mask_bias, probe)
            self.vectors_injected += self.n_layers * k * B

        self.forward_count += B
        return h


def set_freeze(stack, direction, count, freeze_word_embeddings=True):
    """Freeze `count` layers starting from the given end of the stack.

    (bottom, l, True) is the default fully frozen configuration;
    (top, 0, False) makes the whole encoder trainable.
    """
    l = stack.n_layers
    if count == -1:
        count = l
    if direction not in ("bottom", "top"):
        raise ValueError(f"freeze direction must be bottom or top, got {direction!r}")
    if not 0 <= count <= l:
        raise ValueError(f"frozen layer count {count} out of range 0..{l}")
    frozen = set(range(count)) if direction == "bottom" else set(range(l - count, l))
    for i in range(l):
        for name in stack.layer_param_names(i):
            stack.group.set_trainable(name, i not in frozen)
    for name in stack.embedding_param_names():
        stack.group.set_trainable(name, not freeze_word_embeddings)
    stack.freeze = FreezeSpec(direction, count, freeze_word_embeddings)
    return stack
