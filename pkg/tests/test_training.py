"""Objective formulas, warmup schedule, filtered ranking vs brute force,
ensemble averaging, and training-loop contracts on a miniature dataset."""

import math

import numpy as np
import pytest

from promptlink import kg
from promptlink.kg import FilterIndex
from promptlink.model import QueryArrays, prepare_queries
from promptlink.tensor import default_dtype, tensor
from promptlink.toy import ToySize, generate_toy_kg
from promptlink.training import (TrainConfig, TrainingError, alpha_schedule,
                                 ce_loss, ensemble_evaluate, evaluate_filtered,
                                 filtered_rank, total_loss, train)


def reference_ce(scores, target, eps, conventional=False):
    """Independent scalar evaluation of the printed loss formula."""
    exps = [math.exp(s) for s in scores]
    z = sum(exps)
    logp = [math.log(e / z) for e in exps]
    n = len(scores)
    denom = (n - 1) if conventional else n
    rest = sum(lp for i, lp in enumerate(logp) if i != target)
    return -(1 - eps) * logp[target] - (eps / denom) * rest


class TestCeLoss:
    def test_two_entities_equal_scores(self):
        with default_dtype(np.float64):
            out = ce_loss(tensor([[1.0, 1.0]]), [0], 0.0)
        np.testing.assert_allclose(out.data, [math.log(2)], atol=1e-12)

    def test_near_certain_target_loss_near_zero(self):
        with default_dtype(np.float64):
            out = ce_loss(tensor([[50.0, 0.0]]), [0], 0.0)
        assert out.data[0] < 1e-9

    def test_three_entity_smoothed_matches_reference(self):
        with default_dtype(np.float64):
            out = ce_loss(tensor([[1.0, 0.0, 0.0]]), [0], 0.1)
        np.testing.assert_allclose(out.data, [reference_ce([1.0, 0.0, 0.0], 0, 0.1)],
                                   atol=1e-12)

    def test_conventional_normalizer(self):
        with default_dtype(np.float64):
            out = ce_loss(tensor([[1.0, 0.0, -0.5]]), [1], 0.2, conventional=True)
        np.testing.assert_allclose(out.data,
                                   [reference_ce([1.0, 0.0, -0.5], 1, 0.2, True)],
                                   atol=1e-12)

    def test_eps_zero_is_plain_nll(self):
        with default_dtype(np.float64):
            rng = np.random.default_rng(0)
            scores = rng.normal(size=(4, 7))
            out = ce_loss(tensor(scores), [0, 1, 2, 3], 0.0).data
        for i in range(4):
            ref = reference_ce(list(scores[i]), i, 0.0)
            assert abs(out[i] - ref) < 1e-12

    def test_batched_matches_per_row(self):
        with default_dtype(np.float64):
            rng = np.random.default_rng(1)
            scores = rng.normal(size=(5, 6))
            targets = rng.integers(0, 6, size=5)
            batch = ce_loss(tensor(scores), targets, 0.1).data
            for i in range(5):
                single = ce_loss(tensor(scores[i:i+1]), targets[i:i+1], 0.1).data[0]
                assert abs(batch[i] - single) < 1e-12


class TestAlphaSchedule:
    def test_step_zero_is_zero(self):
        assert alpha_schedule(0, 0.1, 1e-5) == 0.0

    def test_reaches_ceiling_exactly(self):
        assert alpha_schedule(10000, 0.1, 1e-5) == pytest.approx(0.1)
        assert alpha_schedule(20000, 0.1, 1e-5) == 0.1

    def test_zero_alpha_always_zero(self):
        for step in (0, 1, 10**6):
            assert alpha_schedule(step, 0.0, 1e-5) == 0.0

    def test_linear_below_ceiling(self):
        assert alpha_schedule(500, 0.1, 1e-5) == pytest.approx(5e-3)


class TestTotalLoss:
    def test_alpha_zero_equals_ce_sum(self):
        with default_dtype(np.float64):
            rng = np.random.default_rng(2)
            scores = tensor(rng.normal(size=(4, 5)))
            targets = [0, 1, 2, 3]
            total = total_loss(scores, targets, 0.1, alpha_eff=0.0).data
            ce = ce_loss(scores, targets, 0.1).data.sum()
        np.testing.assert_allclose(total, ce, atol=1e-12)

    def test_single_fact_hand_sum(self):
        # 3 entities, hand-set scores; adversaries are entities 1 and 2
        with default_dtype(np.float64):
            scores = tensor([[2.0, 1.0, 0.5]])
            ce = reference_ce([2.0, 1.0, 0.5], 0, 0.1)
            adv_mean = (1.0 + 0.5) / 2
            lar = max(adv_mean - 2.0 + 1.5, 0.0)
            out = total_loss(scores, [0], 0.1, alpha_eff=0.3,
                             adv_ids=np.array([[1, 2]]), margin=1.5).data
        np.testing.assert_allclose(out, ce + 0.3 * lar, atol=1e-12)


class TestFilteredRank:
    def brute_force(self, row, target, known_true):
        """Sort the filtered candidate list, locate the target pessimistically."""
        kept = [(s, i) for i, s in enumerate(row) if i == target or i not in known_true]
        target_score = row[target]
        better = sum(1 for s, i in kept if s > target_score)
        tied = sum(1 for s, i in kept if s == target_score and i != target)
        return 1 + better + tied

    def test_matches_brute_force_with_ties_and_filtering(self):
        rng = np.random.default_rng(7)
        for trial in range(200):
            n = 20
            row = np.round(rng.normal(size=n), 1)  # coarse values force ties
            target = int(rng.integers(n))
            known = set(map(int, rng.choice(n, size=rng.integers(0, 8), replace=False)))
            known.add(target)
            assert filtered_rank(row, target, known) == self.brute_force(row, target, known)

    def test_strictly_highest_is_rank_one(self):
        row = np.array([0.1, 0.9, 0.2])
        assert filtered_rank(row, 1, {1}) == 1

    def test_filtering_promotes_target(self):
        # target ranks third raw, but both higher entries are known true
        row = np.array([5.0, 4.0, 3.0, 1.0])
        assert filtered_rank(row, 2, {0, 1, 2}) == 1

    def test_pessimistic_ties(self):
        row = np.array([1.0, 1.0, 1.0])
        assert filtered_rank(row, 0, {0}) == 3


class FixedScoreModel:
    """Stand-in scorer with a hand-set score table, for ranking tests."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=np.float64)
        self.encoder_forwards = 0

    class _Out:
        def __init__(self, data):
            self.data = data

    def score_queries(self, qa, probe=None):
        self.encoder_forwards += len(qa)
        return self._Out(self.table[qa.heads]), {}

    @property
    def store(self):
        model = self

        class _Store:
            n_entities = model.table.shape[1]
        return _Store()


def query_arrays(heads, rels, targets, forward=None):
    heads = np.asarray(heads, dtype=np.int64)
    n = len(heads)
    return QueryArrays(heads, np.asarray(rels, dtype=np.int64),
                       np.asarray(targets, dtype=np.int64), [None] * n,
                       np.ones(n, dtype=bool) if forward is None
                       else np.asarray(forward, dtype=bool))


class TestEvaluateFiltered:
    def test_hand_set_tables(self):
        table = np.array([
            [9.0, 5.0, 1.0],   # query from head 0: target 0 is rank 1
            [9.0, 5.0, 1.0],   # target 2 rank 3 raw; 0 known -> rank 2
        ])
        model = FixedScoreModel(table)
        fi = FilterIndex()
        fi.add(1, 0, None, 0)
        fi.add(1, 0, None, 2)
        qa = query_arrays([0, 1], [0, 0], [0, 2], forward=[True, False])
        rep = evaluate_filtered(model, qa, fi)
        np.testing.assert_allclose(rep.mrr, (1.0 + 0.5) / 2)
        assert rep.forward["mrr"] == 1.0
        assert rep.inverse["mrr"] == 0.5
        assert rep.n_queries == 2

    def test_metric_ordering_invariants(self):
        rng = np.random.default_rng(3)
        model = FixedScoreModel(rng.normal(size=(30, 30)))
        qa = query_arrays(np.arange(30), np.zeros(30), rng.integers(0, 30, 30))
        rep = evaluate_filtered(model, qa, FilterIndex())
        assert rep.hits1 <= rep.hits3 <= rep.hits10 <= 1.0
        assert rep.hits1 <= rep.mrr <= 1.0

    def test_constant_shift_leaves_metrics_unchanged(self):
        rng = np.random.default_rng(4)
        table = rng.normal(size=(10, 10))
        qa = query_arrays(np.arange(10), np.zeros(10), rng.integers(0, 10, 10))
        r1 = evaluate_filtered(FixedScoreModel(table), qa, FilterIndex())
        r2 = evaluate_filtered(FixedScoreModel(table + 123.0), qa, FilterIndex())
        assert (r1.mrr, r1.hits1, r1.hits10) == (r2.mrr, r2.hits1, r2.hits10)

    def test_empty_split_errors(self):
        with pytest.raises(ValueError, match="empty"):
            evaluate_filtered(FixedScoreModel(np.zeros((1, 2))),
                              query_arrays([], [], []), FilterIndex())

    def test_report_json_shape(self):
        model = FixedScoreModel(np.eye(4))
        qa = query_arrays([0, 1], [0, 0], [0, 1])
        rep = evaluate_filtered(model, qa, FilterIndex())
        d = rep.to_dict()
        for key in ("mrr", "hits1", "hits3", "hits10", "forward", "inverse",
                    "encoder_forwards", "wall_seconds"):
            assert key in d


class TestEnsemble:
    def test_same_model_twice_matches_single(self):
        rng = np.random.default_rng(5)
        table = rng.normal(size=(12, 12))
        qa = query_arrays(np.arange(12), np.zeros(12), rng.integers(0, 12, 12))
        single = evaluate_filtered(FixedScoreModel(table), qa, FilterIndex())
        both = ensemble_evaluate(FixedScoreModel(table), FixedScoreModel(table),
                                 qa, FilterIndex())
        assert single.mrr == both.mrr

    def test_averaged_probabilities_normalized(self):
        rng = np.random.default_rng(6)
        from promptlink.training import _np_softmax
        avg = 0.5 * (_np_softmax(rng.normal(size=(5, 9)))
                     + _np_softmax(rng.normal(size=(5, 9))))
        np.testing.assert_allclose(avg.sum(axis=1), 1.0, atol=1e-9)

    def test_entity_space_mismatch(self):
        qa = query_arrays([0], [0], [0])
        with pytest.raises(ValueError, match="entity space"):
            ensemble_evaluate(FixedScoreModel(np.zeros((2, 3))),
                              FixedScoreModel(np.zeros((2, 4))), qa, FilterIndex())


@pytest.fixture(scope="module")
def mini_graph(tmp_path_factory):
    out = tmp_path_factory.mktemp("mini") / "kgdata"
    generate_toy_kg(out, seed=3, size=ToySize(n_base_names=3, n_cities=2, n_countries=2))
    return kg.augment_inverse(kg.load_dataset(str(out)))


def mini_config(**kw):
    base = dict(epochs=2, seed=0, embed_dim=8, map_hidden=16, k_per_source=1,
                enc_layers=2, enc_hidden=16, enc_heads=2, conve_rows=2,
                conve_cols=4, conve_channels=4, batch_size=16, eval_batch=64,
                alpha=0.1, alpha_step=1e-2, n_lar=4)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_log_and_best_selection(self, mini_graph):
        res = train(mini_graph, mini_config(epochs=3))
        assert len(res.log_lines) == 3
        mrrs = [float(line.split("\t")[2]) for line in res.log_lines]
        assert res.best_valid_mrr == pytest.approx(max(mrrs), abs=1e-6)
        assert res.best_epoch == int(np.argmax(mrrs))  # ties keep earliest

    def test_same_seed_same_log_modulo_wall_time(self, mini_graph):
        a = train(mini_graph, mini_config())
        b = train(mini_graph, mini_config())
        strip = lambda lines: ["\t".join(l.split("\t")[:4]) for l in lines]
        assert strip(a.log_lines) == strip(b.log_lines)

    def test_different_seed_different_trajectory(self, mini_graph):
        a = train(mini_graph, mini_config())
        b = train(mini_graph, mini_config(seed=1))
        assert a.log_lines[0].split("\t")[1] != b.log_lines[0].split("\t")[1]

    def test_frozen_encoder_untouched(self, mini_graph):
        res = train(mini_graph, mini_config())
        model = res.model
        fresh = type(model)(mini_graph, res.vocab, model.cfg, seed=model.cfg.seed)
        for name in model.group.frozen_names():
            assert model.group[name].data.tobytes() == fresh.group[name].data.tobytes(), name

    def test_checkpoint_written_and_loadable(self, mini_graph, tmp_path):
        from promptlink.optim import load_checkpoint
        res = train(mini_graph, mini_config(), out_dir=str(tmp_path / "run"))
        arrays, echo = load_checkpoint(res.checkpoint_path)
        assert echo["n_entities"] == mini_graph.n_entities
        assert set(arrays) == set(res.model.group.names())

    def test_nonfinite_loss_aborts_with_dump(self, mini_graph):
        with pytest.raises(TrainingError) as e, np.errstate(all="ignore"):
            train(mini_graph, mini_config(lr=1e30, epochs=3, alpha=0.0))
        assert e.value.batch_dump is not None
        assert "heads" in e.value.batch_dump

    def test_early_stop_on_mrr(self, mini_graph):
        res = train(mini_graph, mini_config(epochs=50, early_stop_mrr=0.01))
        assert res.epochs_run < 50

    def test_invalid_config_rejected(self, mini_graph):
        with pytest.raises(ValueError):
            train(mini_graph, mini_config(label_smoothing=1.5))
