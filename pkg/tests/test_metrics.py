import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grade.core import ContractError, SessionArrays
from grade.metrics import (
    COL_CLICK,
    COL_GPM_TOP2,
    COL_GRADED,
    RelevanceVector,
    binary_relevance,
    dcg,
    gpm_relevance,
    graded_relevance,
    ndcg,
)
from tests.conftest import make_session, random_session
from tests.oracles import exhaustive_idcg, python_dcg


class TestDcg:
    @pytest.mark.parametrize(
        "rel, expected",
        [([0, 0, 0], 0.0), ([1, 0, 0], 1.0), ([0, 1, 0], 1 / np.log2(3)), ([1.0, 0.5], 1 + (2**0.5 - 1) / np.log2(3))],
    )
    def test_examples(self, rel, expected):
        assert dcg(rel) == pytest.approx(expected, abs=1e-14)

    def test_published_decimals(self):
        # the five-decimal figures are truncated, not rounded (1.2613384...)
        assert dcg([0, 1, 0]) == pytest.approx(0.63093, abs=1e-5)
        assert dcg([1.0, 0.5]) == pytest.approx(1.26133, abs=1e-5)

    def test_empty(self):
        with pytest.raises(ContractError):
            dcg([])

    def test_matches_python_sum(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            rel = rng.random(rng.integers(1, 15))
            assert dcg(rel) == pytest.approx(python_dcg(rel), rel=1e-13)


class TestNdcg:
    def test_examples(self):
        assert ndcg([1, 0, 0]) == 1.0
        assert ndcg([0, 1, 0]) == pytest.approx(1 / np.log2(3), abs=1e-14)
        assert ndcg([0, 0, 0]) == 0.0

    def test_sorting_idcg_equals_exhaustive(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            rel = rng.choice([0.0, 0.5, 1.0], size=rng.integers(1, 7))
            ideal = exhaustive_idcg(rel, dcg)
            expected = 0.0 if ideal == 0 else min(dcg(rel) / ideal, 1.0)
            assert ndcg(rel) == expected

    def test_relevance_vector_validation(self):
        with pytest.raises(ContractError):
            RelevanceVector(np.array([0.5]), "binary")
        with pytest.raises(ContractError):
            RelevanceVector(np.array([1.5]), "graded")
        with pytest.raises(ContractError):
            RelevanceVector(np.array([1.0]), "other")


class TestRelevanceRules:
    def test_binary(self):
        labels = np.zeros((3, 3), int)
        labels[2, 0] = 1
        s = make_session(np.full((3, 4), 0.5), labels)
        assert binary_relevance(s, [2, 0, 1], "ctr").rel.tolist() == [1, 0, 0]
        labels = np.zeros((3, 3), int)
        labels[[0, 1], 0] = 1
        s = make_session(np.full((3, 4), 0.5), labels)
        assert binary_relevance(s, [1, 2, 0], "ctr").rel.tolist() == [1, 0, 1]
        assert binary_relevance(s, [1, 2, 0], "cvr").rel.tolist() == [0, 0, 0]

    def test_binary_rejects_gpm_and_bad_permutation(self):
        s = make_session(np.full((3, 4), 0.5))
        with pytest.raises(ContractError):
            binary_relevance(s, [0, 1, 2], "gpm")
        with pytest.raises(ContractError):
            binary_relevance(s, [0, 0, 1], "ctr")

    def test_gpm_top2(self):
        scores = np.zeros((3, 4))
        scores[:, 3] = [0.9, 0.1, 0.5]
        converted = np.array([[1, 1, 0], [0, 0, 0], [0, 0, 0]])
        s = make_session(scores, converted)
        assert gpm_relevance(s, [0, 1, 2]).rel.tolist() == [1, 0, 1]
        assert gpm_relevance(make_session(scores), [0, 1, 2]).rel.tolist() == [0, 0, 0]

    def test_gpm_two_items(self):
        s = make_session(np.random.default_rng(0).random((2, 4)), [[1, 1, 0], [0, 0, 0]])
        assert gpm_relevance(s, [1, 0]).rel.tolist() == [1, 1]

    def test_gpm_tie_by_id(self):
        scores = np.full((3, 4), 0.5)
        s = make_session(scores, [[1, 1, 0], [0, 0, 0], [0, 0, 0]], ids=[9, 4, 6])
        assert gpm_relevance(s, [0, 1, 2]).rel.tolist() == [0, 1, 1]

    def test_graded(self):
        scores = np.array([[0.2, 0, 0, 0], [0.8, 0, 0, 0]])
        assert graded_relevance(make_session(scores), [1, 0], 0).rel.tolist() == [0.8, 0.2]
        const = graded_relevance(make_session(np.full((4, 4), 0.5)), [3, 1, 0, 2], 2).rel
        assert const.tolist() == [0.5] * 4


class TestRelevanceTable:
    def test_matches_per_session_functions(self):
        rng = np.random.default_rng(4)
        sessions = [random_session(rng, n=7, sid=i) for i in range(40)]
        data = SessionArrays.from_sessions(sessions)
        table = data.relevance_table()
        orders = np.stack([rng.permutation(7) for _ in sessions])
        nd = table.ndcg(np.arange(40), orders)
        for i, s in enumerate(sessions):
            r = orders[i]
            assert nd[i, COL_CLICK] == pytest.approx(ndcg(binary_relevance(s, r, "ctr")), abs=1e-12)
            assert nd[i, COL_GPM_TOP2] == pytest.approx(ndcg(gpm_relevance(s, r)), abs=1e-12)
            for k in range(4):
                assert nd[i, COL_GRADED[k]] == pytest.approx(ndcg(graded_relevance(s, r, k)), abs=1e-12)


relevance_lists = st.lists(st.sampled_from([0.0, 0.5, 1.0]), min_size=1, max_size=8)


class TestProperties:
    @given(relevance_lists)
    def test_bounded(self, rel):
        assert 0.0 <= ndcg(rel) <= 1.0

    @given(relevance_lists)
    def test_sorted_is_ideal(self, rel):
        if max(rel) > 0:
            assert ndcg(sorted(rel, reverse=True)) == 1.0

    @given(relevance_lists)
    def test_ideal_iff_non_increasing(self, rel):
        if max(rel) > 0:
            non_increasing = all(x >= y for x, y in zip(rel, rel[1:]))
            assert (ndcg(rel) == 1.0) == non_increasing

    @settings(max_examples=200)
    @given(st.lists(st.integers(0, 1000).map(lambda v: v / 1000), min_size=2, max_size=10), st.data())
    def test_adjacent_swap_improves(self, rel, data):
        i = data.draw(st.integers(0, len(rel) - 2))
        if rel[i] < rel[i + 1]:
            swapped = list(rel)
            swapped[i], swapped[i + 1] = swapped[i + 1], swapped[i]
            assert dcg(swapped) > dcg(rel)
