"""Graph-based scoring functions over (h_hat, r_hat) and tail embeddings.

All variants score every tail with one pass over the embedding table, so
per-query cost never includes an encoder forward per candidate. Higher
scores mean more plausible facts.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

SCORER_KINDS = ("transe", "distmult", "conve", "text_only")


class EmbeddingStore:
    """Trainable entity/relation tables, used at both inputs and outputs."""

    def __init__(self, group, n_entities, n_relations, dim, rng=None, prefix="emb"):
        rng = rng or np.random.default_rng(0)
        dt = T.get_default_dtype()
        scale = 1.0 / np.sqrt(dim)
        self.dim = dim
        self.entities = group.register(
            f"{prefix}.entities", Tensor(rng.normal(0, scale, size=(n_entities, dim)).astype(dt)))
        self.relations = group.register(
            f"{prefix}.relations", Tensor(rng.normal(0, scale, size=(n_relations, dim)).astype(dt)))

    @property
    def n_entities(self):
        return self.entities.shape[0]

    def entity(self, ids):
        return T.embedding(self.entities, ids)

    def relation(self, ids):
        return T.embedding(self.relations, ids)


class TransEScorer:
    """f = -||h_hat + r_hat - t||_p, zero exactly at a perfect translation."""

    def __init__(self, group=None, p=2, rng=None, prefix="scorer"):
        if p not in (1, 2):
            raise ValueError(f"TransE norm order must be 1 or 2, got {p}")
        self.p = p

    def score_one(self, h_hat, r_hat, t_emb):
        diff = h_hat + r_hat - t_emb
        norm = T.l2_norm(diff, axis=-1) if self.p == 2 else T.l1_norm(diff, axis=-1)
        return -norm

    def score_all(self, h_hat, r_hat, store):
        B, d = h_hat.shape
        q = (h_hat + r_hat).reshape(B, 1, d)
        diff = q - store.entities.reshape(1, store.n_entities, d)
        norm = T.l2_norm(diff, axis=-1) if self.p == 2 else T.l1_norm(diff, axis=-1)
        return -norm


class DistMultScorer:
    """Trilinear form f = sum_i h_i * r_i * t_i."""

    def __init__(self, group=None, rng=None, prefix="scorer"):
        pass

    def score_one(self, h_hat, r_hat, t_emb):
        return (h_hat * r_hat * t_emb).sum(axis=-1)

    def score_all(self, h_hat, r_hat, store):
        return (h_hat * r_hat) @ T.transpose(store.entities, (1, 0))


class ConvEScorer:
    """Stack 2-D reshapes of h_hat and r_hat, convolve, map back to R^d,
    then dot against every tail embedding. Plain dot product: no batch
    norm, no per-tail bias."""

    def __init__(self, group, embed_dim, rows=8, cols=8, channels=8, kernel=3,
                 rng=None, prefix="scorer"):
        if rows * cols != embed_dim:
            raise ValueError(
                f"ConvE reshape {rows}x{cols} does not factor embedding width {embed_dim}")
        rng = rng or np.random.default_rng(0)
        dt = T.get_default_dtype()
        self.rows, self.cols, self.channels, self.kernel = rows, cols, channels, kernel
        self.pad = kernel // 2
        oh = 2 * rows + 2 * self.pad - kernel + 1
        ow = cols + 2 * self.pad - kernel + 1
        flat = channels * oh * ow
        self.d = embed_dim
        k_in = kernel * kernel
        self.conv_w = group.register(
            f"{prefix}.conv_w",
            Tensor((rng.uniform(-1, 1, size=(channels, 1, kernel, kernel))
                    * np.sqrt(6.0 / (k_in + k_in * channels))).astype(dt)))
        self.conv_b = group.register(f"{prefix}.conv_b", Tensor(np.zeros(channels, dtype=dt)))
        a = np.sqrt(6.0 / (flat + embed_dim))
        self.fc_w = group.register(
            f"{prefix}.fc_w", Tensor(rng.uniform(-a, a, size=(flat, embed_dim)).astype(dt)))
        self.fc_b = group.register(f"{prefix}.fc_b", Tensor(np.zeros(embed_dim, dtype=dt)))

    def query_map(self, h_hat, r_hat):
        """(B, d) pair -> nonnegative (B, d) representation (final ReLU)."""
        B = h_hat.shape[0]
        hm = h_hat.reshape(B, 1, self.rows, self.cols)
        rm = r_hat.reshape(B, 1, self.rows, self.cols)
        stacked = T.concat([hm, rm], axis=2)
        conv = T.relu(T.conv2d(stacked, self.conv_w, self.conv_b, padding=self.pad))
        flat = conv.reshape(B, -1)
        return T.relu(flat @ self.fc_w + self.fc_b)

    def score_one(self, h_hat, r_hat, t_emb):
        return (self.query_map(h_hat, r_hat) * t_emb).sum(axis=-1)

    def score_all(self, h_hat, r_hat, store):
        return self.query_map(h_hat, r_hat) @ T.transpose(store.entities, (1, 0))


class TextOnlyHead:
    """No-graph ablation: a linear layer from pooled encoder states straight
    to entity logits; tail embeddings never enter the score."""

    def __init__(self, group, n_entities, hidden, rng=None, prefix="scorer"):
        rng = rng or np.random.default_rng(0)
        dt = T.get_default_dtype()
        a = np.sqrt(6.0 / (2 * hidden + n_entities))
        self.w_cls = group.register(
            f"{prefix}.w_cls", Tensor(rng.uniform(-a, a, size=(2 * hidden, n_entities)).astype(dt)))

    def score_all_from_states(self, z_h, z_r):
        return T.concat([z_h, z_r], axis=1) @ self.w_cls


def make_scorer(kind, group, embed_dim, n_entities, hidden, rng, transe_p=2,
                conve_rows=8, conve_cols=8, conve_channels=8, conve_kernel=3):
    if kind == "transe":
        return TransEScorer(p=transe_p)
    if kind == "distmult":
        return DistMultScorer()
    if kind == "conve":
        return ConvEScorer(group, embed_dim, conve_rows, conve_cols,
                           conve_channels, conve_kernel, rng=rng)
    if kind == "text_only":
        return TextOnlyHead(group, n_entities, hidden, rng=rng)
    raise ValueError(f"unknown scorer kind {kind!r}; expected one of {SCORER_KINDS}")
