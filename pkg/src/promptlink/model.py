"""Full query-scoring model: graph embeddings condition per-layer soft
prompts inside a frozen encoder, and the prompt-slot outputs feed a
graph scorer over the entity table.

Variant axes (all selected through the config object):
  strategy     joint | separated          one encoder pass vs one per source
  prompt_mode  layerwise | input_only     fresh vectors every layer vs layer 1
  scorer       transe | distmult | conve | text_only
  graph_only   skip text entirely; score raw embeddings (ensemble component)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kg as kg_mod
from . import tensor as T
from .encoder import EncoderStack, build_query_tokens, pad_token_batch, set_freeze
from .optim import ParameterGroup
from .prompts import InputOnlyPromptGenerator, PromptGenerator, QueryReadout
from .scorers import EmbeddingStore, TextOnlyHead, make_scorer


@dataclass
class QueryArrays:
    """Pre-tokenized query batches for one fact list (both directions)."""
    heads: np.ndarray
    rels: np.ndarray
    targets: np.ndarray
    metas: list
    forward: np.ndarray
    tokens: np.ndarray | None = None        # joint strategy
    head_tokens: np.ndarray | None = None   # separated strategy
    rel_tokens: np.ndarray | None = None

    def __len__(self):
        return len(self.heads)

    def take(self, idx):
        return QueryArrays(
            self.heads[idx], self.rels[idx], self.targets[idx],
            [self.metas[i] for i in idx], self.forward[idx],
            None if self.tokens is None else self.tokens[idx],
            None if self.head_tokens is None else self.head_tokens[idx],
            None if self.rel_tokens is None else self.rel_tokens[idx])


def prepare_queries(graph, vocab, facts, strategy="joint", max_text_len=64):
    """Expand facts into both query directions and tokenize once up front."""
    queries = kg_mod.expand_queries(graph, facts)
    heads = np.array([q[0] for q in queries], dtype=np.int64)
    rels = np.array([q[1] for q in queries], dtype=np.int64)
    targets = np.array([q[2] for q in queries], dtype=np.int64)
    metas = [q[3] for q in queries]
    forward = np.array([q[4] for q in queries], dtype=bool)
    qa = QueryArrays(heads, rels, targets, metas, forward)
    if strategy == "joint":
        seqs = [build_query_tokens(graph, vocab, h, r, m, "joint", max_text_len)
                for h, r, m in zip(heads, rels, metas)]
        qa.tokens = pad_token_batch(seqs)
    else:
        pairs = [build_query_tokens(graph, vocab, h, r, m, "separated", max_text_len)
                 for h, r, m in zip(heads, rels, metas)]
        qa.head_tokens = pad_token_batch([p[0] for p in pairs])
        qa.rel_tokens = pad_token_batch([p[1] for p in pairs])
    return qa


class KGCModel:
    """Assembled scoring model over an augmented graph.

    Each component draws from its own child of the master seed, so e.g.
    swapping the scorer kind leaves every other component's
    initialization bit-identical.
    """

    def __init__(self, graph, vocab, cfg, seed=0):
        if not graph.augmented:
            raise ValueError("KGCModel requires an inverse-augmented graph")
        if cfg.graph_only and cfg.scorer == "text_only":
            raise ValueError("graph_only and the text_only head are mutually exclusive")
        self.graph = graph
        self.vocab = vocab
        self.cfg = cfg
        self.seed = seed
        self.group = ParameterGroup()

        ss = np.random.SeedSequence(seed)
        rngs = [np.random.default_rng(s) for s in ss.spawn(5)]
        r_emb, r_prompt, r_enc, r_read, r_score = rngs

        self.store = EmbeddingStore(self.group, graph.n_entities, graph.n_relations,
                                    cfg.embed_dim, rng=r_emb)
        self.encoder = None
        self.pgen = None
        self.readout = None
        if not cfg.graph_only:
            if cfg.prompt_mode == "layerwise":
                self.pgen = PromptGenerator(self.group, cfg.embed_dim, cfg.enc_layers,
                                            cfg.enc_hidden, cfg.k_per_source,
                                            cfg.map_hidden, rng=r_prompt)
            elif cfg.prompt_mode == "input_only":
                k_in = cfg.input_prompt_len if cfg.input_prompt_len > 0 else None
                self.pgen = InputOnlyPromptGenerator(
                    self.group, cfg.embed_dim, cfg.enc_layers, cfg.enc_hidden,
                    cfg.k_per_source, cfg.map_hidden, k_input=k_in, rng=r_prompt)
            else:
                raise ValueError(f"unknown prompt mode {cfg.prompt_mode!r}")
            self.encoder = EncoderStack(self.group, len(vocab), cfg.enc_layers,
                                        cfg.enc_hidden, cfg.enc_heads,
                                        cfg.max_text_len, cfg.dropout,
                                        cfg.enc_residual_gain, rng=r_enc)
            set_freeze(self.encoder, cfg.freeze_direction, cfg.freeze_count,
                       cfg.freeze_word_embeddings)
            self.readout = QueryReadout(self.group, cfg.embed_dim, cfg.enc_hidden, rng=r_read)
        self.scorer = make_scorer(
            cfg.scorer, self.group, cfg.embed_dim, graph.n_entities, cfg.enc_hidden,
            r_score, transe_p=cfg.transe_p, conve_rows=cfg.conve_rows,
            conve_cols=cfg.conve_cols, conve_channels=cfg.conve_channels,
            conve_kernel=cfg.conve_kernel)

    @property
    def encoder_forwards(self):
        return 0 if self.encoder is None else self.encoder.forward_count

    def _encode_joint(self, e_h, e_r, tokens, probe=None):
        prompts = self.pgen.generate(e_h, e_r)
        mode = self.cfg.prompt_mode
        states = self.encoder.forward(prompts, tokens, mode=mode, probe=probe)
        k = prompts.shape[2] if mode == "layerwise" else prompts.shape[1]
        return self.readout.pool(states, k)

    def _encode_separated(self, e_h, e_r, head_tokens, rel_tokens, probe=None):
        if self.cfg.prompt_mode == "layerwise":
            half_h, half_r = self.pgen.generate_halves(e_h, e_r)
            s_h = self.encoder.forward(half_h, head_tokens, mode="layerwise", probe=probe)
            s_r = self.encoder.forward(half_r, rel_tokens, mode="layerwise", probe=probe)
            kh = half_h.shape[2]
        else:
            both = self.pgen.generate(e_h, e_r)
            kh = both.shape[1] // 2
            s_h = self.encoder.forward(both[:, :kh, :], head_tokens, mode="input_only", probe=probe)
            s_r = self.encoder.forward(both[:, kh:, :], rel_tokens, mode="input_only", probe=probe)
        z_h = s_h[:, :kh, :].mean(axis=1)
        z_r = s_r[:, :kh, :].mean(axis=1)
        return z_h, z_r

    def score_queries(self, qa, probe=None):
        """Score every entity for each query in `qa`; returns (scores, aux).

        scores is a (B, n_entities) tensor; aux carries the intermediate
        query representations for heads that need them.
        """
        e_h = self.store.entity(qa.heads)
        e_r = self.store.relation(qa.rels)
        aux = {}
        if self.cfg.graph_only:
            h_hat, r_hat = e_h, e_r
            aux["h_hat"], aux["r_hat"] = h_hat, r_hat
            return self.scorer.score_all(h_hat, r_hat, self.store), aux

        if self.cfg.strategy == "joint":
            z_h, z_r = self._encode_joint(e_h, e_r, qa.tokens, probe)
        elif self.cfg.strategy == "separated":
            z_h, z_r = self._encode_separated(e_h, e_r, qa.head_tokens, qa.rel_tokens, probe)
        else:
            raise ValueError(f"unknown strategy {self.cfg.strategy!r}")
        aux["z_h"], aux["z_r"] = z_h, z_r

        if isinstance(self.scorer, TextOnlyHead):
            return self.scorer.score_all_from_states(z_h, z_r), aux
        h_hat, r_hat = self.readout.project(z_h, z_r)
        aux["h_hat"], aux["r_hat"] = h_hat, r_hat
        return self.scorer.score_all(h_hat, r_hat, self.store), aux

    # -- persistence -----------------------------------------------------------

    def state_arrays(self):
        return self.group.arrays()

    def load_state(self, arrays):
        self.group.load_arrays(arrays)
