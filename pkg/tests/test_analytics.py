import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from muloco import analytics, engine
from muloco.analytics import StepTerm, interference_gap, nuclear_decomposition_audit, top_s
from muloco.inner_optim import OptimConfig
from muloco.model_zoo import TwoLayerMLP


def _orthonormal(m, n, seed):
    u, _, vt = np.linalg.svd(np.random.default_rng(seed).standard_normal((m, n)), full_matrices=False)
    return u @ vt


class TestInterferenceGap:
    def test_identical(self):
        a = np.random.default_rng(0).standard_normal((4, 5))
        assert interference_gap([a, a, a], 2) == pytest.approx(0.0, abs=1e-12)

    def test_diagonal_pair(self):
        pair = [np.diag([1.0, 0.0]), np.diag([0.0, 1.0])]
        assert interference_gap(pair, 1) == pytest.approx(0.5, rel=1e-14)
        assert interference_gap(pair, 2) == pytest.approx(0.0, abs=1e-14)

    @given(st.integers(0, 1000), st.integers(1, 4))
    def test_non_negative(self, seed, s):
        rng = np.random.default_rng(seed)
        mats = [rng.standard_normal((4, 6)) for _ in range(3)]
        # Ky Fan norms are convex, so averaging never increases top-S mass.
        assert interference_gap(mats, s) >= -1e-12

    def test_range(self):
        with pytest.raises(ValueError):
            interference_gap([np.eye(3)], 4)
        with pytest.raises(ValueError):
            interference_gap([np.eye(3), np.eye(2)], 1)

    def test_top_s(self):
        assert top_s(0.05, 32) == 2 and top_s(0.05, 8) == 1 and top_s(1.0, 7) == 7


class TestAudit:
    def test_single_orthonormal_step(self):
        q = _orthonormal(5, 3, 0)
        rec = nuclear_decomposition_audit([StepTerm(0, 0, 1.0, q)], q, 1)
        assert rec.lhs == pytest.approx(3.0, rel=1e-12) and rec.rhs == pytest.approx(3.0, rel=1e-12)
        assert rec.rhs_orthonormal == pytest.approx(3.0, rel=1e-12)

    def test_random_6x4(self):
        rng = np.random.default_rng(1)
        steps = [StepTerm(k, h, float(rng.uniform(0.1, 1)), rng.standard_normal((6, 4)))
                 for k in range(2) for h in range(3)]
        psi = sum(t.alpha * t.psi for t in steps) / 2
        rec = nuclear_decomposition_audit(steps, psi, 2)
        assert rec.rel_discrepancy < 1e-9
        assert rec.lhs == pytest.approx(np.linalg.svd(psi, compute_uv=False).sum(), rel=1e-12)

    def test_cancellation_is_degenerate(self):
        q = _orthonormal(3, 3, 2)
        rec = nuclear_decomposition_audit([StepTerm(0, 0, 1.0, q), StepTerm(1, 0, 1.0, -q)], np.zeros((3, 3)), 2)
        assert rec.degenerate and rec.lhs == 0.0 and rec.rhs == 0.0

    def test_inconsistent_precondition(self):
        q = _orthonormal(3, 3, 3)
        with pytest.raises(ValueError):
            nuclear_decomposition_audit([StepTerm(0, 0, 1.0, q)], 2 * q, 1)

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            nuclear_decomposition_audit([StepTerm(0, 0, -1.0, np.eye(2))], -np.eye(2), 1)


class TestReports:
    @staticmethod
    def _run(kind, lr):
        task = TwoLayerMLP(6, 10, 3, seed=0, noise_std=0.3)
        cfg = engine.RunConfig(workers=3, inner_steps=5, rounds=2, global_batch=12, lr_schedule="constant",
                               inner=OptimConfig(kind, lr=lr), record_pseudogradients=True, record_deltas=True,
                               record_steps=True)
        return engine.run(cfg, task)[1]

    @pytest.fixture(scope="class")
    @classmethod
    def logs(cls):
        return cls._run("muon", 0.01)

    def test_identical_workers_cosine_one(self):
        a = np.random.default_rng(0).standard_normal((3, 4))
        log = engine.RoundLog(0, 5, 1.0, 1.0, 1.0, pseudogradients={"w": a}, deltas=[{"w": a}, {"w": a}])
        report = analytics.alignment_report([log])
        assert all(v == pytest.approx(1.0, rel=1e-15) for v in report.values("worker_vs_reference"))

    def test_zero_pseudogradient_flagged(self, tmp_path):
        z = np.zeros((2, 2))
        log = engine.RoundLog(0, 5, 1.0, 1.0, 1.0, pseudogradients={"w": z}, deltas=[{"w": np.eye(2)}, {"w": -np.eye(2)}])
        report = analytics.alignment_report([log])
        assert all(r.degenerate for r in report.rows)
        analytics.write_csv(tmp_path / "a.csv", report.rows)
        rows = list(csv.DictReader(open(tmp_path / "a.csv")))
        assert {r["value"] for r in rows} == {analytics.DEGENERATE}

    def test_metrics_and_reference(self, logs):
        report = analytics.alignment_report(logs, parameters=["W1", "W2"])
        metrics = {r.metric for r in report.rows}
        assert metrics == {"worker_vs_reference", "trajectory_vs_pseudogradient", "step_vs_pseudogradient"}
        ref = {log.round_index: log.pseudogradients for log in logs}
        with_ref = analytics.alignment_report(logs, reference=ref, parameters=["W1"])
        assert all(v == pytest.approx(1.0) for v in with_ref.values("pseudogradient_vs_reference"))
        q = report.summary()[("W1", "worker_vs_reference")]
        assert q[0] <= q[1] <= q[2]

    def test_missing_snapshots(self):
        with pytest.raises(ValueError):
            analytics.alignment_report([engine.RoundLog(0, 1, 1.0, 1.0, 1.0)])
        with pytest.raises(ValueError):
            analytics.step_norm_trace([engine.RoundLog(0, 1, 1.0, 1.0, 1.0)])

    def test_spectra(self, logs):
        rep = analytics.spectra(logs[0].deltas, (0.05, 0.5))
        assert set(rep.psi_sigmas) == {"W1", "W2"}
        assert set(rep.gaps["W1"]) == {1, 3}
        mean = sum(d["W1"] for d in logs[0].deltas) / 3
        assert np.allclose(rep.psi_sigmas["W1"], np.linalg.svd(mean, compute_uv=False), atol=1e-14)
        rows = analytics.spectral_rows(rep, 0)
        assert any(r.metric == "interference_gap_top1" for r in rows)

    def test_step_norm_trace_muon_stable(self, logs):
        trace = analytics.step_norm_trace(logs, ["W1"])
        cv = analytics.coefficient_of_variation([r.step_norm for r in trace])
        adam = analytics.step_norm_trace(self._run("adamw", 0.01), ["W1"])
        assert cv < analytics.coefficient_of_variation([r.step_norm for r in adam])
        assert all(r.direction_norm == pytest.approx(r.step_norm / r.lr) for r in trace)
        assert len(analytics.trace_rows(trace)) == 2 * len(trace)

    def test_audit_on_engine_round(self, logs):
        """The pseudogradient of an uncompressed round decomposes exactly into its inner steps."""
        log = logs[0]
        terms = [StepTerm(s.worker, s.step, s.lr, s.matrix / s.lr) for s in log.steps if s.name == "W2"]
        rec = nuclear_decomposition_audit(terms, log.pseudogradients["W2"], 3, tol=1e-9)
        assert rec.rel_discrepancy < 1e-9

    def test_coefficient_of_variation(self):
        assert analytics.coefficient_of_variation([2.0, 2.0]) == 0.0
        assert analytics.coefficient_of_variation([1.0, 3.0]) == pytest.approx(0.5)
        with pytest.raises(ValueError):
            analytics.coefficient_of_variation([])
        with pytest.raises(ValueError):
            analytics.coefficient_of_variation([1.0, -1.0])
