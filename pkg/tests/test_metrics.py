import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from shapediff.metrics import (MetricError, MetricReport, emd, evaluate, js_divergence, jsd,
                               mmd_cov, one_nna, pairwise_distance_matrix)
from shapediff.regularizers import chamfer


def clouds(rng, k, n=16, offset=0.0):
    return [rng.standard_normal((n, 3)) + offset for _ in range(k)]


def test_emd_trivial():
    P = np.random.default_rng(0).standard_normal((10, 3))
    assert emd(P, P) == 0.0
    assert emd(np.zeros((1, 3)), np.array([[1.0, 0, 0]])) == 1.0


def test_emd_matches_permutation_oracle(rng):
    for _ in range(10):
        P, Q = rng.standard_normal((2, 6, 3))
        assert emd(P, Q) == pytest.approx(oracles.emd(P, Q), abs=1e-9)


def test_emd_errors():
    with pytest.raises(MetricError):
        emd(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(MetricError):
        emd(np.zeros((5, 3)), np.zeros((5, 3)), cap=4)


def test_emd_triangle_inequality(rng):
    for _ in range(10):
        A, B, C = rng.standard_normal((3, 8, 3))
        assert emd(A, C) <= emd(A, B) + emd(B, C) + 1e-12


def test_emd_permutation_invariant(rng):
    P, Q = rng.standard_normal((2, 12, 3))
    assert emd(P, Q) == pytest.approx(emd(P[rng.permutation(12)], Q[rng.permutation(12)]), abs=1e-12)


def test_pairwise_matrix(rng):
    A, B = clouds(rng, 3), clouds(rng, 3)
    for metric, fn in (("CD", chamfer), ("EMD", emd)):
        D = pairwise_distance_matrix(A, B, metric)
        assert D.shape == (3, 3)
        for a in range(3):
            for b in range(3):
                assert D[a, b] == fn(A[a], B[b])
        assert np.all(np.diag(pairwise_distance_matrix(A, A, metric)) == 0)
        assert np.array_equal(pairwise_distance_matrix(B, A, metric), D.T)
    assert np.array_equal(pairwise_distance_matrix(A, B, "CD", workers=3), pairwise_distance_matrix(A, B, "CD"))


def test_pairwise_errors(rng):
    with pytest.raises(MetricError):
        pairwise_distance_matrix([], clouds(rng, 1))
    with pytest.raises(MetricError):
        pairwise_distance_matrix(clouds(rng, 1), clouds(rng, 1), "L2")


def test_mmd_cov(rng):
    ref = clouds(rng, 5)
    assert mmd_cov(ref, ref) == (0.0, 1.0)
    assert mmd_cov(clouds(rng, 1), ref)[1] == pytest.approx(1 / 5)
    gen = clouds(rng, 5)
    D = pairwise_distance_matrix(gen, ref)
    m, c = mmd_cov(gen, ref)
    om, oc = oracles.mmd_cov(D.tolist())
    assert m == pytest.approx(om, rel=1e-14) and c == oc


def test_one_nna_separated_clusters(rng):
    assert one_nna(clouds(rng, 5), clouds(rng, 5, offset=50.0)) == 1.0


def test_one_nna_matches_enumeration(rng):
    pool = clouds(rng, 6, n=10)
    gen = [pool[0], pool[1], pool[2], pool[3]]
    ref = [pool[2], pool[3], pool[4], pool[5]]
    allv = gen + ref
    D = [[chamfer(a, b) for b in allv] for a in allv]
    want = oracles.one_nna(D, [0] * 4 + [1] * 4)
    assert one_nna(gen, ref) == want


def test_one_nna_deterministic_under_shuffle(rng):
    ref = clouds(rng, 6)
    order = rng.permutation(6)
    shuffled = [ref[i] for i in order]
    assert one_nna(ref, shuffled) == one_nna(ref, shuffled)


def test_one_nna_same_distribution_near_half():
    rng = np.random.default_rng(0)
    vals = [one_nna(clouds(rng, 20, 32), clouds(rng, 20, 32)) for _ in range(5)]
    assert 0.3 < np.mean(vals) < 0.7


def test_one_nna_needs_two():
    with pytest.raises(MetricError):
        one_nna([np.zeros((2, 3))], [np.zeros((2, 3)), np.ones((2, 3))])


def test_jsd_identical_and_disjoint():
    A = [np.zeros((4, 3))]
    B = [np.ones((4, 3))]
    assert jsd(A, A) == 0.0
    assert jsd(A, B) == pytest.approx(math.log(2))


def test_js_divergence_two_cells():
    p, q = [0.75, 0.25], [0.25, 0.75]
    assert js_divergence(p, q) == pytest.approx(oracles.jsd_hist(p, q), rel=1e-14)


def test_jsd_union_box_sees_scale(rng):
    A = [rng.standard_normal((200, 3))]
    assert jsd(A, [2 * A[0]]) > 0.05


def test_jsd_errors():
    with pytest.raises(MetricError):
        jsd([], [np.zeros((1, 3))])
    with pytest.raises(MetricError):
        jsd([np.zeros((1, 3))], [np.zeros((1, 3))], resolution=1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_jsd_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    A, B = clouds(rng, 2, 20), clouds(rng, 3, 20, offset=rng.uniform(-1, 1))
    a, b = jsd(A, B), jsd(B, A)
    assert a == pytest.approx(b, abs=1e-15)
    assert 0.0 <= a <= math.log(2) + 1e-15


def test_metrics_permutation_invariant(rng):
    A, B = clouds(rng, 3), clouds(rng, 3)
    Ap = [a[rng.permutation(len(a))] for a in A]
    assert np.allclose(pairwise_distance_matrix(A, B), pairwise_distance_matrix(Ap, B), rtol=1e-14)
    assert jsd(A, B) == jsd(Ap, B)


def test_evaluate_report(rng):
    ref = clouds(rng, 4)
    rep, warns = evaluate(ref, ref)
    assert warns == []
    assert rep.mmd_cd == 0 and rep.cov_cd == 1 and rep.jsd == 0
    assert rep.mmd_emd == 0 and rep.cov_emd == 1
    data = json.loads(rep.to_json())
    assert data["config"]["jsd_resolution"] == 28
    text = rep.to_text()
    assert "mmd_cd_x1000=" in text and "jsd_x100=" in text and "cov_cd=1" in text


def test_evaluate_skips_emd_on_unequal_counts(rng):
    rep, warns = evaluate([rng.standard_normal((8, 3))], [rng.standard_normal((9, 3))])
    assert rep.mmd_emd is None and warns
    assert "mmd_emd=skipped" in rep.to_text()


def test_report_presentation_scaling():
    rep = MetricReport(mmd_cd=0.002, cov_cd=0.5, one_nna_cd=0.5, jsd=0.01, n_generated=2,
                       n_reference=2, mmd_emd=0.03, cov_emd=0.5, one_nna_emd=0.5)
    text = rep.to_text()
    assert "mmd_cd_x1000=2\n" in text and "mmd_emd_x10=0.3\n" in text and "jsd_x100=1\n" in text
    assert json.loads(rep.to_json())["mmd_cd"] == 0.002
