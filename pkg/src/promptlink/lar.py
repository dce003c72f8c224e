"""Local adversarial regularization: real entities that look textually like
the gold tail, precomputed from token overlap, plus the margin penalty.

Index tokens are the discriminative keywords of each entity's name and
description: lowercase alphabetic tokens of length >= 3 that appear in at
most a df_max fraction of entities. Two entities are mutual candidates
iff they share at least one surviving token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import tokenize


@dataclass
class LarConfig:
    n_samples: int = 8
    margin: float = 1.0
    source: str = "keyword"      # keyword | random
    df_max: float = 0.05
    min_token_len: int = 3
    sign_mode: str = "corrected"  # corrected | as_written


class LarIndex:
    """Per-entity candidate lists from shared index tokens."""

    def __init__(self, candidates, index_tokens):
        self.candidates = candidates        # entity id -> sorted np.ndarray of ids
        self.index_tokens = index_tokens    # entity id -> frozenset of tokens

    def __len__(self):
        return len(self.candidates)

    def shares_token(self, a, b):
        return bool(self.index_tokens[a] & self.index_tokens[b])

    def dump_lines(self):
        """`entity_id<TAB>comma-separated-candidate-ids` per entity, id order."""
        lines = []
        for eid in range(len(self.candidates)):
            ids = ",".join(str(i) for i in self.candidates[eid])
            lines.append(f"{eid}\t{ids}")
        return lines


def build_lar_index(graph, config=None):
    """Precompute candidate lists for every entity; deterministic."""
    config = config or LarConfig()
    n = graph.n_entities
    tokens_per_entity = []
    for rec in graph.entity_text:
        toks = {t for t in tokenize(rec.name) + tokenize(rec.description)
                if len(t) >= config.min_token_len and t.isalpha()}
        tokens_per_entity.append(toks)

    df = {}
    for toks in tokens_per_entity:
        for t in toks:
            df[t] = df.get(t, 0) + 1
    cutoff = config.df_max * n
    kept = {t for t, c in df.items() if c <= cutoff}

    index_tokens = [frozenset(toks & kept) for toks in tokens_per_entity]
    by_token = {}
    for eid, toks in enumerate(index_tokens):
        for t in toks:
            by_token.setdefault(t, []).append(eid)

    candidates = []
    for eid, toks in enumerate(index_tokens):
        cands = set()
        for t in toks:
            cands.update(by_token[t])
        cands.discard(eid)
        candidates.append(np.array(sorted(cands), dtype=np.int64))
    return LarIndex(candidates, index_tokens)


def sample_lar(index, target, n, rng, exclude=(), n_entities=None, source="keyword"):
    """Draw n distinct adversary ids for `target`.

    Keyword source samples uniformly without replacement from the target's
    candidate list minus `exclude`; any shortfall is padded with uniform
    random entities outside exclude+{target}. Returns (ids, n_keyword)
    where the first n_keyword entries came from the candidate list.
    """
    if n_entities is None:
        n_entities = len(index)
    excluded = set(exclude)
    excluded.add(target)

    picks = []
    if source == "keyword":
        pool = [c for c in index.candidates[target] if c not in excluded]
        if len(pool) >= n:
            picks = list(rng.choice(len(pool), size=n, replace=False))
            picks = [pool[i] for i in picks]
        else:
            picks = list(pool)
    elif source != "random":
        raise ValueError(f"unknown LAR source {source!r}")
    n_keyword = len(picks)

    need = n - n_keyword
    if need > 0:
        allowed = np.setdiff1d(np.arange(n_entities, dtype=np.int64),
                               np.fromiter(excluded | set(picks), dtype=np.int64))
        if len(allowed) < need:
            raise ValueError(
                f"entity space too small: need {need} more adversaries, "
                f"only {len(allowed)} entities available")
        pads = rng.choice(len(allowed), size=need, replace=False)
        picks.extend(allowed[i] for i in pads)
    return np.asarray(picks, dtype=np.int64), n_keyword


def lar_loss(f_true, f_adv, margin, sign_mode="corrected"):
    """Margin penalty between the valid fact's score and the adversary mean.

    corrected (default): max(mean(f_adv) - f_true + margin, 0), pushing the
    valid fact `margin` above its adversaries. as_written flips the two
    score terms. Works on trailing-axis batches: f_true (...,),
    f_adv (..., n).
    """
    adv_mean = f_adv.mean(axis=-1)
    if sign_mode == "corrected":
        gap = adv_mean - f_true + margin
    elif sign_mode == "as_written":
        gap = f_true - adv_mean + margin
    else:
        raise ValueError(f"unknown sign mode {sign_mode!r}")
    return T.relu(gap)
