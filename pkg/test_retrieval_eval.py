"""Tests for query composition, ranking and Recall@K."""

import logging
import sys

import numpy as np
import pytest

from utils.config import substream
from utils.errors import EmptyTaskSetError, InvalidInputError, TemplateError
from utils.pcm import init_mapping
from utils.retrieval_eval import (
    EvalQuery,
    EvalTaskSet,
    QueryTemplate,
    TemplateKind,
    build_query_prompt,
    compose_query,
    evaluate,
    rank_candidates,
    recall_at_k,
)
from utils.synth_world import make_eval_tasks


def _naive_rank(query, gallery):
    scores = [float(g @ query / (np.linalg.norm(g) * np.linalg.norm(query))) for g in gallery]
    return sorted(range(len(gallery)), key=lambda i: (-scores[i], i))


def _naive_recall(rankings, truth, k):
    return sum(1 for r, t in zip(rankings, truth) if set(r[:min(k, len(r))]) & set(t)) / len(rankings)


class TestRanking:
    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n, q, d = int(rng.integers(1, 500)), int(rng.integers(1, 200)), int(rng.integers(2, 12))
            gallery = rng.normal(size=(n, d))
            queries = rng.normal(size=(q, d))
            truth = [set(rng.choice(n, size=int(rng.integers(1, min(n, 3) + 1)), replace=False).tolist())
                     for _ in range(q)]
            rankings = [rank_candidates(x, gallery) for x in queries]
            for x, r in zip(queries[:5], rankings[:5]):
                assert list(r) == _naive_rank(x, gallery)
            previous = 0.0
            for k in (1, 5, 10, 50):
                value = recall_at_k(rankings, truth, k)
                assert value == _naive_recall(rankings, truth, k)
                assert value >= previous
                previous = value

    def test_ties_lowest_index_first(self):
        gallery = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [3.0, 0.0]])
        assert list(rank_candidates(np.array([1.0, 0.0]), gallery)) == [0, 1, 3, 2]

    def test_empty_gallery(self):
        with pytest.raises(InvalidInputError):
            rank_candidates(np.ones(3), np.zeros((0, 3)))


class TestRecall:
    def test_hand_case(self):
        rankings = [[2, 0, 1], [0, 1, 2]]
        truth = [{0}, {2}]
        assert recall_at_k(rankings, truth, 1) == 0.0
        assert recall_at_k(rankings, truth, 2) == 0.5
        assert recall_at_k(rankings, truth, 3) == 1.0

    def test_k_above_gallery_is_clamped(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert recall_at_k([[1, 0]], [{0}], 50) == 1.0
        assert "clamping" in caplog.text

    def test_no_rankings(self):
        with pytest.raises(EmptyTaskSetError):
            recall_at_k([], [], 1)

    def test_bad_k(self):
        with pytest.raises(InvalidInputError):
            recall_at_k([[0]], [{0}], 0)

    def test_random_queries_sit_at_chance(self):
        rng = np.random.default_rng(1)
        n, q = 50, 4000
        gallery = rng.normal(size=(n, 8))
        rankings = [rank_candidates(x, gallery) for x in rng.normal(size=(q, 8))]
        truth = [{int(t)} for t in rng.integers(n, size=q)]
        assert recall_at_k(rankings, truth, 5) == pytest.approx(5 / n, abs=0.03)


class TestComposeQuery:
    def test_domain_template_takes_one_tag(self):
        with pytest.raises(TemplateError):
            QueryTemplate(TemplateKind.DOMAIN_CONVERSION, (1, 2)).validate()

    def test_object_template_renders(self, encoders16):
        tags = encoders16.vocab.encode(["word0", "word1"])
        seq = build_query_prompt(np.zeros(16), QueryTemplate.objects(tags), encoders16)
        assert encoders16.vocab.render(seq.token_ids) == "a photo of [*] , word0 and word1"

    def test_query_is_unit_norm(self, encoders16):
        params = init_mapping(16, 16, substream(0, "init"))
        template = QueryTemplate.sentence(encoders16.vocab.encode(["word2"]))
        q = compose_query(params, np.random.default_rng(2).normal(size=16), template, encoders16)
        assert np.linalg.norm(q) == pytest.approx(1.0, abs=1e-12)


class TestEvaluate:
    @pytest.fixture
    def tasks(self, encoders16):
        rng = np.random.default_rng(3)
        gallery = rng.normal(size=(20, 16))
        ids = [f"g{i}" for i in range(20)]
        tag = encoders16.vocab.id("word3")

        def task(name, kind):
            queries = [EvalQuery(f"{name}{i}", rng.normal(size=16), QueryTemplate(kind, (tag,)), {i}) for i in range(6)]
            return EvalTaskSet(name, queries, gallery, ids)

        return [task("dom", TemplateKind.DOMAIN_CONVERSION), task("obj", TemplateKind.OBJECT_COMPOSITION)]

    def test_rows_and_average(self, tasks, encoders16):
        params = init_mapping(16, 16, substream(0, "init"))
        report = evaluate(params, tasks, encoders16, ks=(1, 5), metadata={"seed": 0})
        assert {(r["task"], r["k"]) for r in report.rows} == {
            ("dom", 1), ("dom", 5), ("obj", 1), ("obj", 5), ("average", 1), ("average", 5)}
        avg = (report.recall("dom", 5) + report.recall("obj", 5)) / 2
        assert report.recall("average", 5) == pytest.approx(avg)
        assert list(report.to_frame().columns) == ["task", "k", "recall", "queries"]
        assert report.to_dict()["metadata"] == {"seed": 0}

    def test_no_tasks(self, encoders16):
        with pytest.raises(EmptyTaskSetError):
            evaluate(init_mapping(16, 16, substream(0, "init")), [], encoders16)

    def test_missing_row(self, tasks, encoders16):
        report = evaluate(init_mapping(16, 16, substream(0, "init")), tasks[:1], encoders16, ks=(1,))
        with pytest.raises(KeyError):
            report.recall("dom", 10)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_untrained_mapping_sits_at_chance(reference_world, seed):
    world = reference_world(seed)
    params = init_mapping(world.encoders.d, world.encoders.token_dim, substream(seed, "init"))
    task = make_eval_tasks(world, TemplateKind.OBJECT_COMPOSITION, max_queries=500, seed=seed)
    report = evaluate(params, [task], world.encoders, ks=(1,))
    p = np.array([len(q.truth) / len(task.gallery_ids) for q in task.queries])
    sigma = np.sqrt(np.sum(p * (1.0 - p))) / len(p)
    assert len(p) == 500
    assert abs(report.recall(task.name, 1) - p.mean()) <= 3.0 * sigma


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
