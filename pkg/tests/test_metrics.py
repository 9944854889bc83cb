import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact.cli import evaluate_fixture
from artifact.detect.env import BoundingVolume
from artifact.metrics import (
    FrocCase, FrocPoint, Tagged, dice_matrix, froc, match_detections, patient_score, patient_scores, read_froc_csv,
    roc_auc, roc_curve, sensitivity_at, write_froc_csv, write_roc_csv, write_svg,
)
from helpers import exhaustive_max_tp, pairwise_auc

FIX = Path(__file__).parent / "fixtures" / "froc3"
LAT = (12, 12, 8)


def random_box(rng, lat=LAT):
    lo = [int(rng.integers(0, n - 2)) for n in lat]
    hi = [int(rng.integers(a + 2, n + 1)) for a, n in zip(lo, lat)]
    return BoundingVolume(*lo, *hi)


class TestRoc:
    def test_examples(self):
        assert roc_auc([0.9, 0.1], [1, 0]) == 1.0
        assert roc_auc([0.1, 0.9], [1, 0]) == 0.0
        assert roc_auc([0.5, 0.5], [1, 0]) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.2], [0, 0])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 50))
    def test_matches_pairwise_oracle(self, seed, n):
        rng = np.random.default_rng(seed)
        s = np.round(rng.random(n), 1)  # rounding forces ties
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        assert abs(roc_auc(s, y) - pairwise_auc(s, y)) < 1e-12
        assert roc_auc(np.exp(3 * s) - 7, y) == roc_auc(s, y)

    def test_curve_endpoints(self):
        pts = roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        assert pts[0][1:] == (0.0, 0.0) and pts[-1][1:] == (1.0, 1.0)
        assert all(a[1] <= b[1] and a[2] <= b[2] for a, b in zip(pts, pts[1:]))


class TestPatients:
    def test_max(self):
        assert patient_score([0.3, 0.8]) == 0.8
        assert patient_score([0.5]) == 0.5
        with pytest.raises(ValueError):
            patient_score([])

    def test_patient_auc_equals_restricted_breast_auc(self):
        # every patient has one affected breast; the other always scores lower
        rng = np.random.default_rng(0)
        bs, bl, pof = {}, {}, {}
        for p in range(30):
            hot = rng.random()
            bs[f"P{p}_L"], bl[f"P{p}_L"] = hot, int(p % 3 == 0)
            bs[f"P{p}_R"], bl[f"P{p}_R"] = hot * rng.random() * 0.5, 0
            pof[f"P{p}_L"] = pof[f"P{p}_R"] = f"P{p}"
        ps, pl = patient_scores(bs, bl, pof)
        left = [b for b in bs if b.endswith("_L")]
        assert roc_auc(list(ps.values()), list(pl.values())) == roc_auc([bs[b] for b in left], [bl[b] for b in left])


class TestMatching:
    def _single(self, det_box):
        # lesion 20x10x10; detections of the same size shifted along x
        lesion = BoundingVolume(0, 0, 0, 20, 10, 10).rasterize((40, 20, 20))
        return match_detections([det_box], [lesion])

    def test_above_criterion(self):
        m = self._single(BoundingVolume(15, 0, 0, 35, 10, 10))  # overlap 500: Dice 1000/4000 = 0.25
        assert (m.tp, m.fp) == (1, 0)

    def test_below_criterion(self):
        m = self._single(BoundingVolume(17, 0, 0, 37, 10, 10))  # overlap 300: Dice 0.15
        assert (m.tp, m.fp) == (0, 1)

    def test_one_match_per_lesion(self):
        lesion = BoundingVolume(0, 0, 0, 10, 10, 10).rasterize((20, 20, 20))
        m = match_detections([BoundingVolume(0, 0, 0, 10, 10, 10), BoundingVolume(2, 0, 0, 12, 10, 10)], [lesion])
        assert (m.tp, m.fp) == (1, 1) and m.pairs == [(0, 0)]

    def test_greedy_shortfall_example(self):
        # region 0 overlaps both lesions best; greedy gives it lesion 0 and strands region 1
        d = np.array([[0.9, 0.3], [0.5, 0.0]])
        assert match_detections([0, 1], [0, 1], dmat=d, method="greedy").tp == 1
        assert match_detections([0, 1], [0, 1], dmat=d).tp == 2 == exhaustive_max_tp(d, 0.2)

    def test_tagged_regions_never_cross_breasts(self):
        m = BoundingVolume(0, 0, 0, 4, 4, 4).rasterize((8, 8, 8))
        b = BoundingVolume(0, 0, 0, 4, 4, 4)
        assert dice_matrix([Tagged("L", b)], [Tagged("R", m)])[0, 0] == 0.0
        assert dice_matrix([Tagged("L", b)], [Tagged("L", m)])[0, 0] == 1.0
        with pytest.raises(TypeError):
            dice_matrix([b], [Tagged("L", m)])

    @settings(max_examples=300, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_tp_equals_exhaustive(self, seed):
        rng = np.random.default_rng(seed)
        dets = [random_box(rng) for _ in range(rng.integers(0, 7))]
        les = [random_box(rng).rasterize(LAT) for _ in range(rng.integers(1, 4))]
        d = dice_matrix(dets, les)
        m = match_detections(dets, les, dmat=d)
        assert m.tp == exhaustive_max_tp(d, 0.2)
        assert m.tp <= len(les) and m.tp + m.fp == len(dets)
        assert all(d[i, j] >= 0.2 for i, j in m.pairs)
        assert len({i for i, _ in m.pairs}) == len({j for _, j in m.pairs}) == m.tp


def _perfect_cases(n=4):
    rng = np.random.default_rng(1)
    cases = []
    for p in range(n):
        boxes = [random_box(rng) for _ in range(2)]
        cases.append(FrocCase(list(boxes), list(rng.random(2)), [b.rasterize(LAT) for b in boxes],
                              diagnosed=bool(p % 2)))
    return cases


class TestFroc:
    def test_threshold_above_all(self):
        pts = froc(_perfect_cases(), thresholds=[2.0])
        assert pts == [FrocPoint(2.0, 0.0, 0.0)]

    def test_perfect_detections(self):
        assert froc(_perfect_cases(), thresholds=[0.0])[0].tpr == 1.0

    def test_monotone(self):
        rng = np.random.default_rng(2)
        cases = [FrocCase([random_box(rng) for _ in range(5)], list(rng.random(5)),
                          [random_box(rng).rasterize(LAT) for _ in range(2)]) for _ in range(6)]
        pts = froc(cases)
        assert all(a.threshold > b.threshold for a, b in zip(pts, pts[1:]))
        assert all(a.tpr <= b.tpr and a.fpp <= b.fpp for a, b in zip(pts, pts[1:]))

    def test_unknown_scenario(self):
        with pytest.raises(ValueError):
            froc([], scenario="B")

    def test_sensitivity_at(self):
        pts = [FrocPoint(0.9, 0.2, 0.0), FrocPoint(0.5, 0.6, 2.0), FrocPoint(0.1, 0.9, 4.0)]
        assert sensitivity_at(pts, 3.0) == 0.6 and sensitivity_at(pts, 10) == 0.9 and sensitivity_at([], 1) == 0.0

    @pytest.mark.parametrize("scenario,golden", [("A", "expected_A.csv"), ("+", "expected_plus.csv")])
    def test_golden_fixture(self, tmp_path, scenario, golden):
        truth = json.loads((FIX / "truth.json").read_text())
        truth["scenario"] = scenario
        (tmp_path / "truth.json").write_text(json.dumps(truth))
        evaluate_fixture(FIX / "detections.csv", tmp_path / "truth.json", tmp_path / "out.csv")
        got, want = read_froc_csv(tmp_path / "out.csv"), read_froc_csv(FIX / golden)
        assert [p.threshold for p in got] == [p.threshold for p in want]
        for g, w in zip(got, want):
            assert g.tpr == pytest.approx(w.tpr, abs=1e-12) and g.fpp == pytest.approx(w.fpp, abs=1e-12)


def test_curve_files(tmp_path):
    pts = [FrocPoint(float("inf"), 0.0, 0.0), FrocPoint(0.1 + 0.2, 1 / 3, 2 / 3)]
    write_froc_csv(tmp_path / "f.csv", pts)
    assert read_froc_csv(tmp_path / "f.csv") == pts
    write_roc_csv(tmp_path / "r.csv", roc_curve([0.1, 0.9], [0, 1]))
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "threshold,tpr,fpr"
    write_svg(tmp_path / "c.svg", {"a": [(p.fpp, p.tpr) for p in pts]}, "FPP", "TPR")
    text = (tmp_path / "c.svg").read_text()
    assert text.startswith("<svg") and "polyline" in text
