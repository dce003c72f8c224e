"""Conditional soft-prompt generation from graph embeddings.

Each source (query entity, query relation) owns a two-layer map
F(x) = W_out . ReLU(W_in . x). Its output is reshaped to one half of the
per-layer prompt slots: the first k/2 slots of every layer are
entity-conditioned, the last k/2 relation-conditioned. The input-only
variant emits k' vectors for layer 1 alone, sized to match the
layer-wise generator's trainable parameter count.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _xavier(rng, fan_in, fan_out, dt):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dt)


class PromptGenerator:
    """Layer-wise generator: (B, d) embeddings -> (B, l, k, H) prompt vectors."""

    def __init__(self, group, embed_dim, n_layers, hidden, k_per_source,
                 map_hidden=128, rng=None, prefix="prompt"):
        if k_per_source < 1:
            raise ValueError("need at least one prompt slot per source")
        rng = rng or np.random.default_rng(0)
        dt = T.get_default_dtype()
        self.d = embed_dim
        self.l = n_layers
        self.H = hidden
        self.k_src = k_per_source
        self.k = 2 * k_per_source
        self.d_h = map_hidden
        out_dim = n_layers * hidden * k_per_source  # l * H * k/2 per source
        self.w_in = {}
        self.w_out = {}
        for src in ("entity", "relation"):
            self.w_in[src] = group.register(
                f"{prefix}.{src}.w_in", Tensor(_xavier(rng, embed_dim, map_hidden, dt)))
            self.w_out[src] = group.register(
                f"{prefix}.{src}.w_out", Tensor(_xavier(rng, map_hidden, out_dim, dt)))

    def n_trainable_values(self):
        per_source = self.d * self.d_h + self.d_h * self.l * self.H * self.k_src
        return 2 * per_source

    def _half(self, src, emb):
        B = emb.shape[0]
        out = T.relu(emb @ self.w_in[src]) @ self.w_out[src]
        return out.reshape(B, self.l, self.k_src, self.H)

    def generate(self, e_head, e_rel):
        """Per-layer prompts; fully differentiable w.r.t. both embeddings."""
        if e_head.shape[-1] != self.d or e_rel.shape[-1] != self.d:
            raise T.ShapeError(
                f"embedding width mismatch: expected {self.d}, got "
                f"{e_head.shape[-1]} and {e_rel.shape[-1]}")
        return T.concat([self._half("entity", e_head), self._half("relation", e_rel)], axis=2)

    def generate_halves(self, e_head, e_rel):
        """Separated-strategy form: one (B, l, k/2, H) block per source."""
        return self._half("entity", e_head), self._half("relation", e_rel)


class InputOnlyPromptGenerator:
    """Ablation variant: all prompt capacity at layer 1.

    k' defaults to l*k, which matches the layer-wise generator's
    parameter count exactly; any explicit k' must stay within 5%.
    """

    def __init__(self, group, embed_dim, n_layers, hidden, k_per_source,
                 map_hidden=128, k_input=None, rng=None, prefix="prompt_in"):
        rng = rng or np.random.default_rng(0)
        dt = T.get_default_dtype()
        self.d = embed_dim
        self.H = hidden
        self.d_h = map_hidden
        target = n_layers * hidden * k_per_source  # layer-wise per-source output dim
        if k_input is None:
            k_input = 2 * n_layers * k_per_source
        if k_input % 2:
            raise ValueError(f"input-only prompt length k'={k_input} must be even")
        self.k_input = k_input
        out_dim = hidden * (k_input // 2)
        per_src_lw = embed_dim * map_hidden + map_hidden * target
        per_src_io = embed_dim * map_hidden + map_hidden * out_dim
        gap = abs(per_src_io - per_src_lw) / per_src_lw
        if gap > 0.05:
            best = 2 * n_layers * k_per_source
            raise ValueError(
                f"k'={k_input} misses the layer-wise parameter count by {gap:.1%} "
                f"(> 5%); nearest matching k' is {best}")
        self.w_in = {}
        self.w_out = {}
        for src in ("entity", "relation"):
            self.w_in[src] = group.register(
                f"{prefix}.{src}.w_in", Tensor(_xavier(rng, embed_dim, map_hidden, dt)))
            self.w_out[src] = group.register(
                f"{prefix}.{src}.w_out", Tensor(_xavier(rng, map_hidden, out_dim, dt)))

    def n_trainable_values(self):
        per_source = self.d * self.d_h + self.d_h * self.H * (self.k_input // 2)
        return 2 * per_source

    def generate(self, e_head, e_rel):
        """Layer-1 prompts only, shape (B, k', H); entity half first."""
        B = e_head.shape[0]
        halves = []
        for src, emb in (("entity", e_head), ("relation", e_rel)):
            out = T.relu(emb @ self.w_in[src]) @ self.w_out[src]
            halves.append(out.reshape(B, self.k_input // 2, self.H))
        return T.concat(halves, axis=1)


class QueryReadout:
    """Pool prompt-slot outputs and project them back to embedding width.

    z_h is the mean over entity-conditioned slots (the first k/2), z_r
    over relation slots; trainable maps U_h, U_r produce the scorer
    inputs h_hat, r_hat in R^d.
    """

    def __init__(self, group, embed_dim, hidden, rng=None, prefix="readout"):
        rng = rng or np.random.default_rng(0)
        dt = T.get_default_dtype()
        self.u_h = group.register(f"{prefix}.u_h", Tensor(_xavier(rng, hidden, embed_dim, dt)))
        self.u_r = group.register(f"{prefix}.u_r", Tensor(_xavier(rng, hidden, embed_dim, dt)))

    def pool(self, states, k):
        """(z_h, z_r) from last-layer states; slots split half and half."""
        half = k // 2
        z_h = states[:, :half, :].mean(axis=1)
        z_r = states[:, half:k, :].mean(axis=1)
        return z_h, z_r

    def project(self, z_h, z_r):
        return z_h @ self.u_h, z_r @ self.u_r

    def extract(self, states, k):
        z_h, z_r = self.pool(states, k)
        h_hat, r_hat = self.project(z_h, z_r)
        return h_hat, r_hat, z_h, z_r
