import numpy as np
import pytest

from bmia.evaluation import (
    REPORT_HEADER,
    AttackReport,
    RocCurve,
    auc,
    make_report,
    read_report,
    roc_curve,
    tpr_at_fpr,
    write_report,
)


def _brute_force_roc(stats, members):
    # Count members / non-members at or above every candidate threshold.
    n_pos = members.sum()
    n_neg = (~members).sum()
    points = {(0.0, 0.0)}
    for thr in np.unique(stats):
        called = stats >= thr
        points.add(((called & ~members).sum() / n_neg, (called & members).sum() / n_pos))
    return sorted(points)


class TestRoc:
    def test_perfect(self):
        curve = roc_curve([0.9, 0.1], [True, False])
        assert auc(curve) == 1.0

    def test_inverted(self):
        assert auc(roc_curve([0.1, 0.9], [True, False])) == 0.0

    def test_all_tied(self):
        curve = roc_curve([0.3] * 6, [True, False] * 3)
        assert curve.points == [(0.0, 0.0), (1.0, 1.0)]
        assert auc(curve) == 0.5

    def test_single_class(self):
        with pytest.raises(ValueError):
            roc_curve([0.1, 0.2], [True, True])

    def test_nan(self):
        with pytest.raises(ValueError):
            roc_curve([0.1, np.nan], [True, False])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            roc_curve([0.1, 0.2, 0.3], [True, False])

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 501))
            # Coarse rounding forces plenty of ties.
            stats = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
            members = rng.random(n) < rng.uniform(0.1, 0.9)
            members[0], members[1] = True, False
            curve = roc_curve(stats, members)
            assert curve.points == _brute_force_roc(stats, members)
            assert curve.points[0] == (0.0, 0.0) and curve.points[-1] == (1.0, 1.0)
            assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        stats = rng.normal(size=300)
        members = rng.random(300) < 0.5
        base = roc_curve(stats, members)
        for transformed in (np.exp(stats), 10 * stats):
            other = roc_curve(transformed, members)
            assert other.points == base.points
            assert auc(other) == auc(base)


class TestTprAtFpr:
    def test_step_rule(self):
        curve = RocCurve(np.array([0.0, 0.005, 0.02, 1.0]), np.array([0.0, 0.3, 0.6, 1.0]))
        assert tpr_at_fpr(curve, 0.01) == 0.3

    def test_diagonal(self):
        n = 1000
        curve = roc_curve(np.arange(2 * n) % n, np.arange(2 * n) < n)
        assert tpr_at_fpr(curve, 0.01) <= 0.01
        assert auc(curve) == pytest.approx(0.5)

    def test_perfect(self):
        curve = roc_curve([3.0, 2.0, 1.0, 0.0], [True, True, False, False])
        for a in (0.001, 0.01, 0.5):
            assert tpr_at_fpr(curve, a) == 1.0

    def test_monotone_in_alpha(self):
        rng = np.random.default_rng(2)
        curve = roc_curve(rng.normal(size=500), rng.random(500) < 0.5)
        vals = [tpr_at_fpr(curve, a) for a in np.linspace(0.001, 0.999, 300)]
        assert np.all(np.diff(vals) >= 0)

    def test_domain(self):
        curve = roc_curve([0.9, 0.1], [True, False])
        with pytest.raises(ValueError):
            tpr_at_fpr(curve, 0.0)


def test_auc_corner_curve():
    assert auc(RocCurve(np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 1.0]))) == 1.0


class TestReport:
    def _report(self, name, seed):
        rng = np.random.default_rng(seed)
        members = rng.random(200) < 0.5
        stats = rng.normal(size=200) + members
        return make_report(name, stats, members, train_seconds=1.25, attack_seconds=0.5)

    def test_header_only(self, tmp_path):
        p = tmp_path / "r.csv"
        write_report([], p)
        assert p.read_text() == ",".join(REPORT_HEADER) + "\n"
        assert p.read_text().startswith(
            "attack,tpr_at_0.1pct,tpr_at_1pct,tpr_at_5pct,auc,train_seconds,attack_seconds\n")

    def test_round_trip(self, tmp_path):
        reports = [self._report("bmia", 0), self._report("lira_offline", 1)]
        p, roc = tmp_path / "r.csv", tmp_path / "roc.csv"
        write_report(reports, p, roc)
        rows = read_report(p)
        assert [r["attack"] for r in rows] == ["bmia", "lira_offline"]
        for r, rep in zip(rows, reports):
            assert r["auc"] == pytest.approx(rep.auc, abs=5e-7)
            assert r["tpr_at_1pct"] == pytest.approx(rep.tpr_at[0.01], abs=5e-7)
            assert r["train_seconds"] == 1.25
        lines = roc.read_text().splitlines()
        assert lines[0] == "attack,fpr,tpr"
        assert lines[1] == "bmia,0.000000000,0.000000000"
        n_points = len(reports[0].curve.points) + len(reports[1].curve.points)
        assert len(lines) == 1 + n_points

    def test_six_decimals(self, tmp_path):
        rep = AttackReport("x", {0.001: 1 / 3, 0.01: 0.5, 0.05: 1.0}, 0.123456789, 1, 1)
        p = tmp_path / "r.csv"
        write_report([rep], p)
        assert p.read_text().splitlines()[1] == "x,0.333333,0.500000,1.000000,0.123457,0.000000,0.000000"

    def test_counts(self):
        rep = make_report("a", [0.1, 0.2, 0.3], [True, False, False])
        assert (rep.n_members, rep.n_nonmembers) == (1, 2)

    def test_unwritable_path(self, tmp_path):
        bad = tmp_path / "missing_dir" / "r.csv"
        with pytest.raises(OSError, match="missing_dir"):
            write_report([], bad)
