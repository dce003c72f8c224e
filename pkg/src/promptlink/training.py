"""Training objective, loop with best-checkpoint selection on validation
MRR, and filtered-ranking evaluation.

The objective is a sum over the batch of label-smoothed cross entropy
plus a warmup-weighted adversarial margin term. Ranking is filtered
(known-true tails removed except the target) and pessimistic on ties.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .kg import build_filter_index
from .lar import LarConfig, build_lar_index, lar_loss, sample_lar
from .model import KGCModel, prepare_queries
from .optim import adamw_step, save_checkpoint
from .encoder import Vocabulary
from .tensor import take_along_last


class TrainingError(RuntimeError):
    """Aborted training run; carries a diagnostic dump of the offending batch."""

    def __init__(self, message, batch_dump=None):
        super().__init__(message)
        self.batch_dump = batch_dump


@dataclass
class TrainConfig:
    # optimization (desk-scale defaults; benchmark-scale grids in the README)
    lr: float = 3e-3
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    label_smoothing: float = 0.1
    smoothing_conventional: bool = False  # eps/(|V|-1) instead of the printed eps/|V|
    # adversarial regularization
    alpha: float = 0.1
    alpha_step: float = 1e-3   # per optimizer step; the benchmark-scale value is 1e-5
    alpha_per_epoch: bool = False
    margin: float = 1.0
    n_lar: int = 8
    lar_source: str = "keyword"
    lar_df_max: float = 0.05
    lar_min_token_len: int = 3
    sign_mode: str = "corrected"
    # architecture
    embed_dim: int = 64
    map_hidden: int = 256
    k_per_source: int = 2
    strategy: str = "joint"
    prompt_mode: str = "layerwise"
    input_prompt_len: int = 0  # 0 = auto-match the layer-wise parameter count
    scorer: str = "conve"
    transe_p: int = 2
    conve_rows: int = 1   # single-row maps keep the kernel on the h/r seam
    conve_cols: int = 64
    conve_channels: int = 8
    conve_kernel: int = 3
    graph_only: bool = False
    enc_layers: int = 4
    enc_hidden: int = 64
    enc_heads: int = 4
    max_text_len: int = 64
    dropout: float = 0.0
    enc_residual_gain: float = 0.25
    freeze_direction: str = "bottom"
    freeze_count: int = -1     # -1 = every layer
    freeze_word_embeddings: bool = True
    # loop control
    early_stop_mrr: float = 0.0  # stop once valid MRR reaches this; 0 disables
    patience: int = 0            # epochs without a new best; 0 disables
    eval_batch: int = 128

    def validate(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.alpha > 0 and self.alpha_step <= 0:
            raise ValueError("alpha_step must be > 0 when alpha > 0")
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.n_lar < 1:
            raise ValueError(f"n_lar must be >= 1, got {self.n_lar}")
        if self.scorer == "conve" and self.conve_rows * self.conve_cols != self.embed_dim:
            raise ValueError(
                f"conve_rows*conve_cols = {self.conve_rows * self.conve_cols} "
                f"must equal embed_dim = {self.embed_dim}")
        return self

    def lar_config(self):
        return LarConfig(self.n_lar, self.margin, self.lar_source,
                         self.lar_df_max, self.lar_min_token_len, self.sign_mode)

    def to_dict(self):
        return asdict(self)


# -- losses ---------------------------------------------------------------

def ce_loss(scores, targets, label_smoothing=0.0, conventional=False):
    """Per-instance label-smoothed cross entropy over the full entity set.

    p = softmax(scores); loss = -(1-eps) log p(target)
    - eps/|V| * sum_{t' != target} log p(t'). `conventional` swaps the
    normalizer to |V|-1.
    """
    n = scores.shape[-1]
    logp = T.log_softmax(scores, axis=-1)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1, 1)
    nll_t = take_along_last(logp, tgt).reshape(-1)
    eps = label_smoothing
    if eps == 0.0:
        return -nll_t
    denom = (n - 1) if conventional else n
    rest = logp.sum(axis=-1) - nll_t
    return -(1.0 - eps) * nll_t - (eps / denom) * rest


def alpha_schedule(step, alpha, alpha_step):
    """Effective adversarial weight after `step` optimizer steps."""
    if alpha <= 0:
        return 0.0
    return min(alpha, alpha_step * step)


def total_loss(scores, targets, label_smoothing, alpha_eff=0.0, adv_ids=None,
               margin=1.0, sign_mode="corrected", conventional_smoothing=False):
    """Batch objective: sum_i ce_i + alpha_eff * lar_i.

    adv_ids is a (B, n) array of adversary entity ids; the adversary
    scores are read out of the same score matrix, so no extra forward
    passes happen here.
    """
    ce = ce_loss(scores, targets, label_smoothing, conventional_smoothing)
    loss = ce.sum()
    if alpha_eff > 0.0 and adv_ids is not None:
        tgt = np.asarray(targets, dtype=np.int64).reshape(-1, 1)
        f_true = take_along_last(scores, tgt).reshape(-1)
        f_adv = take_along_last(scores, np.asarray(adv_ids, dtype=np.int64))
        loss = loss + alpha_eff * lar_loss(f_true, f_adv, margin, sign_mode).sum()
    return loss


# -- filtered ranking -------------------------------------------------------

def filtered_rank(row, target, known_true):
    """Pessimistic filtered rank of `target` within one score row."""
    allowed = np.ones(row.shape[0], dtype=bool)
    for k in known_true:
        if k != target:
            allowed[k] = False
    s_t = row[target]
    greater = int(np.sum((row > s_t) & allowed))
    equal = int(np.sum((row == s_t) & allowed)) - 1  # the target itself
    return 1 + greater + equal


def _metrics(ranks):
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        return {"mrr": 0.0, "hits1": 0.0, "hits3": 0.0, "hits10": 0.0, "n_queries": 0}
    return {
        "mrr": float(np.mean(1.0 / ranks)),
        "hits1": float(np.mean(ranks <= 1)),
        "hits3": float(np.mean(ranks <= 3)),
        "hits10": float(np.mean(ranks <= 10)),
        "n_queries": int(ranks.size),
    }


@dataclass
class EvalReport:
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    n_queries: int
    forward: dict = field(default_factory=dict)
    inverse: dict = field(default_factory=dict)
    encoder_forwards: int = 0
    wall_seconds: float = 0.0

    def to_dict(self):
        return {
            "mrr": self.mrr, "hits1": self.hits1, "hits3": self.hits3,
            "hits10": self.hits10, "n_queries": self.n_queries,
            "forward": self.forward, "inverse": self.inverse,
            "encoder_forwards": self.encoder_forwards,
            "wall_seconds": self.wall_seconds,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _ranks_for_batches(score_fn, qa, filter_index, eval_batch):
    ranks = np.empty(len(qa), dtype=np.int64)
    for start in range(0, len(qa), eval_batch):
        idx = np.arange(start, min(start + eval_batch, len(qa)))
        part = qa.take(idx)
        rows = score_fn(part)
        for j in range(len(idx)):
            known = filter_index.candidates(part.heads[j], part.rels[j], part.metas[j])
            ranks[idx[j]] = filtered_rank(rows[j], part.targets[j], known)
    return ranks


def evaluate_filtered(model, qa, filter_index, eval_batch=128):
    """Filtered-ranking metrics over pre-tokenized queries (both directions)."""
    if len(qa) == 0:
        raise ValueError("evaluation split is empty")
    start_forwards = model.encoder_forwards
    t0 = time.perf_counter()

    def score_fn(part):
        with T.no_grad():
            scores, _ = model.score_queries(part)
        return scores.data

    ranks = _ranks_for_batches(score_fn, qa, filter_index, eval_batch)
    overall = _metrics(ranks)
    report = EvalReport(
        overall["mrr"], overall["hits1"], overall["hits3"], overall["hits10"],
        overall["n_queries"],
        forward=_metrics(ranks[qa.forward]),
        inverse=_metrics(ranks[~qa.forward]),
        encoder_forwards=model.encoder_forwards - start_forwards,
        wall_seconds=time.perf_counter() - t0,
    )
    return report


def _np_softmax(rows):
    shifted = rows - rows.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def ensemble_evaluate(model_graph, model_text, qa, filter_index, eval_batch=128):
    """Bagging baseline: average the two models' softmax-normalized scores."""
    if model_graph.store.n_entities != model_text.store.n_entities:
        raise ValueError("ensemble members disagree on the entity space")
    if len(qa) == 0:
        raise ValueError("evaluation split is empty")
    t0 = time.perf_counter()
    start_forwards = model_graph.encoder_forwards + model_text.encoder_forwards

    def score_fn(part):
        with T.no_grad():
            s1, _ = model_graph.score_queries(part)
            s2, _ = model_text.score_queries(part)
        return 0.5 * (_np_softmax(s1.data) + _np_softmax(s2.data))

    ranks = _ranks_for_batches(score_fn, qa, filter_index, eval_batch)
    overall = _metrics(ranks)
    forwards = model_graph.encoder_forwards + model_text.encoder_forwards - start_forwards
    return EvalReport(
        overall["mrr"], overall["hits1"], overall["hits3"], overall["hits10"],
        overall["n_queries"],
        forward=_metrics(ranks[qa.forward]),
        inverse=_metrics(ranks[~qa.forward]),
        encoder_forwards=forwards,
        wall_seconds=time.perf_counter() - t0,
    )


# -- training loop ------------------------------------------------------------

@dataclass
class TrainResult:
    model: KGCModel
    vocab: Vocabulary
    filter_index: object
    best_valid_mrr: float
    best_epoch: int
    log_lines: list
    epochs_run: int
    wall_seconds: float
    skipped_updates: int
    checkpoint_path: str | None = None


def checkpoint_config(cfg, graph):
    echo = cfg.to_dict()
    echo["n_entities"] = graph.n_entities
    echo["n_relations"] = graph.n_relations
    return echo


def train(graph, cfg, out_dir=None, quiet=True):
    """Run the full training loop and keep the best-valid-MRR parameters.

    Deterministic for a fixed seed in single-worker mode: data order,
    adversary draws and initialization all derive from cfg.seed. Frozen
    parameters are never touched. Aborts with a batch dump if the loss
    goes non-finite.
    """
    cfg.validate()
    if not graph.augmented:
        raise ValueError("train requires an inverse-augmented graph")
    t_start = time.perf_counter()

    vocab = Vocabulary.from_graph(graph)
    model = KGCModel(graph, vocab, cfg, seed=cfg.seed)
    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    lar_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

    qa_train = prepare_queries(graph, vocab, graph.train, cfg.strategy, cfg.max_text_len)
    qa_valid = prepare_queries(graph, vocab, graph.valid, cfg.strategy, cfg.max_text_len)
    filter_index = build_filter_index(graph)

    use_lar = cfg.alpha > 0
    lar_index = None
    if use_lar and cfg.lar_source == "keyword":
        lar_index = build_lar_index(graph, cfg.lar_config())
    # the regularizer must never punish known-true answers
    exclude = [filter_index.candidates(qa_train.heads[i], qa_train.rels[i], qa_train.metas[i])
               for i in range(len(qa_train))]

    n = len(qa_train)
    group = model.group
    best_mrr = -1.0
    best_epoch = -1
    best_arrays = None
    log_lines = []
    skipped_total = 0
    epochs_run = 0

    for epoch in range(cfg.epochs):
        t_epoch = time.perf_counter()
        perm = data_rng.permutation(n)
        epoch_loss = 0.0
        alpha_eff = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            part = qa_train.take(idx)
            step_no = epoch if cfg.alpha_per_epoch else group.step_count
            alpha_eff = alpha_schedule(step_no, cfg.alpha, cfg.alpha_step)
            adv_ids = None
            if use_lar and alpha_eff > 0.0:
                adv_ids = np.stack([
                    sample_lar(lar_index, part.targets[j], cfg.n_lar, lar_rng,
                               exclude=exclude[idx[j]], n_entities=graph.n_entities,
                               source=cfg.lar_source)[0]
                    for j in range(len(idx))])
            group.zero_grad()
            scores, _ = model.score_queries(part)
            loss = total_loss(scores, part.targets, cfg.label_smoothing, alpha_eff,
                              adv_ids, cfg.margin, cfg.sign_mode,
                              cfg.smoothing_conventional)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                dump = {
                    "epoch": epoch, "step": group.step_count,
                    "heads": part.heads.tolist(), "relations": part.rels.tolist(),
                    "targets": part.targets.tolist(),
                    "score_range": [float(np.nanmin(scores.data)),
                                    float(np.nanmax(scores.data))],
                }
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, step {group.step_count}: "
                    + json.dumps(dump), dump)
            epoch_loss += loss_val
            loss.backward()
            skipped_total += adamw_step(group, cfg.lr, cfg.beta1, cfg.beta2,
                                        cfg.adam_eps, cfg.weight_decay)

        valid = evaluate_filtered(model, qa_valid, filter_index, cfg.eval_batch)
        seconds = time.perf_counter() - t_epoch
        line = (f"{epoch}\t{epoch_loss / n:.6f}\t{valid.mrr:.6f}"
                f"\t{alpha_eff:.6f}\t{seconds:.2f}")
        log_lines.append(line)
        if not quiet:
            print(line)
        epochs_run = epoch + 1
        if valid.mrr > best_mrr:  # ties keep the earlier epoch
            best_mrr = valid.mrr
            best_epoch = epoch
            best_arrays = group.arrays()
        if cfg.early_stop_mrr > 0 and valid.mrr >= cfg.early_stop_mrr:
            break
        if cfg.patience > 0 and epoch - best_epoch >= cfg.patience:
            break

    if best_arrays is not None:
        group.load_arrays(best_arrays)

    checkpoint_path = None
    if out_dir is not None:
        import os
        os.makedirs(out_dir, exist_ok=True)
        checkpoint_path = os.path.join(out_dir, "checkpoint.bin")
        save_checkpoint(checkpoint_path, group.arrays(), checkpoint_config(cfg, graph))
        with open(os.path.join(out_dir, "train_log.tsv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(log_lines) + "\n")

    return TrainResult(model, vocab, filter_index, best_mrr, best_epoch,
                       log_lines, epochs_run, time.perf_counter() - t_start,
                       skipped_total, checkpoint_path)
