from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from muloco.compress import (CompressorSpec, EncodedDelta, collective_reduce, comm_bytes, ef_wrap, encode,
                             quant_decode, quant_encode, topk_decode, topk_encode)

EXAMPLE = np.array([[1.0, -5.0], [3.0, 0.5]])

matrices = st.tuples(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 32 - 1)).map(
    lambda t: np.random.default_rng(t[2]).standard_normal((t[0], t[1])))
quant_specs = st.builds(CompressorSpec.quant, st.sampled_from([2, 4, 8]), st.sampled_from(["linear", "statistical"]),
                        st.sampled_from(["global", "rowwise"]))


class TestTopk:
    def test_example(self):
        assert np.array_equal(topk_decode(topk_encode(EXAMPLE, 50.0)), [[0.0, -5.0], [3.0, 0.0]])

    def test_full_is_identity(self):
        x = np.random.default_rng(0).standard_normal((5, 7))
        assert np.array_equal(topk_decode(topk_encode(x, 100.0)), x)

    def test_tie_break_lowest_index(self):
        e = topk_encode(np.full((2, 2), 3.0), 25.0)
        assert e.indices.tolist() == [0]

    @given(matrices, st.floats(0.5, 100.0))
    def test_count_and_exact_values(self, x, pct):
        out = topk_decode(topk_encode(x, pct))
        k = max(1, round(pct / 100 * x.size))
        kept = out != 0
        assert kept.sum() <= k
        assert np.array_equal(out[kept], x[kept])
        dropped = np.abs(x[~kept])
        if dropped.size and kept.any():
            assert dropped.max() <= np.abs(x[kept]).min()

    def test_bad_pct(self):
        with pytest.raises(ValueError):
            topk_encode(EXAMPLE, 0.0)


class TestQuant:
    @pytest.mark.parametrize("scheme", ["linear", "statistical"])
    @pytest.mark.parametrize("bits", [2, 4, 8])
    def test_constant_exact(self, scheme, bits):
        x = np.full((3, 4), -1.25)
        assert np.array_equal(quant_decode(quant_encode(x, CompressorSpec.quant(bits, scheme))), x)

    def test_linear_half_bin(self):
        x = np.random.default_rng(1).uniform(-1, 1, (16, 16))
        x[0, 0], x[0, 1] = -1.0, 1.0
        err = np.abs(quant_decode(quant_encode(x, CompressorSpec.quant(8))) - x)
        assert err.max() <= (2 / 255) / 2

    def test_statistical_separated_clusters(self):
        x = np.array([[-3.0, -3.0, -3.0, 1.0, 1.0, 5.0, 5.0, 5.0]])
        e = quant_encode(x, CompressorSpec.quant(2, "statistical"))
        assert {-3.0, 1.0, 5.0} <= set(e.codebooks[0].tolist())
        assert np.array_equal(quant_decode(e), x)

    def test_rowwise_uses_row_ranges(self):
        x = np.array([[0.0, 1.0], [0.0, 1000.0]])
        out = quant_decode(quant_encode(x, CompressorSpec.quant(2, granularity="rowwise")))
        assert np.array_equal(out, x)

    @given(matrices, quant_specs)
    def test_roundtrip_properties(self, x, spec):
        e = quant_encode(x, spec)
        out = quant_decode(e)
        assert out.shape == x.shape
        assert e.indices.max() < 2 ** spec.bits
        groups = x if spec.granularity == "rowwise" else x.reshape(1, -1)
        for row, rec in zip(groups, out if spec.granularity == "rowwise" else out.reshape(1, -1)):
            assert rec.min() >= row.min() - 1e-12 and rec.max() <= row.max() + 1e-12
        if spec.scheme == "statistical":
            # Lloyd-Max never does worse than the uniform grid it may start from.
            lin = quant_decode(quant_encode(x, CompressorSpec.quant(spec.bits, "linear", spec.granularity)))
            assert np.mean((out - x) ** 2) <= np.mean((lin - x) ** 2) * (1 + 1e-9) + 1e-300

    @given(matrices, quant_specs)
    def test_deterministic_and_serializable(self, x, spec):
        a, b = quant_encode(x, spec), quant_encode(x, spec)
        assert a.to_bytes() == b.to_bytes()
        back = EncodedDelta.from_bytes(a.to_bytes())
        assert np.array_equal(back.decode(), a.decode())

    def test_rejects_non_quant_spec(self):
        with pytest.raises(ValueError):
            quant_encode(EXAMPLE, CompressorSpec())


class TestErrorFeedback:
    def test_lossless_collapses(self):
        rng = np.random.default_rng(2)
        res = np.zeros((3, 3))
        for spec in (CompressorSpec(error_feedback=True), CompressorSpec.topk(100.0, error_feedback=True)):
            for _ in range(3):
                d = rng.standard_normal((3, 3))
                enc, res = ef_wrap(d, res, spec)
                assert np.array_equal(enc.decode(), d) and np.array_equal(res, np.zeros((3, 3)))

    def test_zeroing_codec_accumulates_geometrically(self):
        spec = CompressorSpec(error_feedback=True, ef_beta=0.5)
        zero = lambda w: EncodedDelta("none", w.shape, 0, values=np.zeros(w.size))
        deltas = [np.full((1, 2), float(j + 1)) for j in range(4)]
        res = np.zeros((1, 2))
        for d in deltas:
            _, res = ef_wrap(d, res, spec, codec=zero)
        expected = sum(0.5 ** (3 - j) * d for j, d in enumerate(deltas))
        assert np.allclose(res, expected, rtol=1e-15)

    def test_topk_example(self):
        enc, res = ef_wrap(EXAMPLE, np.zeros((2, 2)), CompressorSpec.topk(50.0, error_feedback=True))
        assert np.array_equal(enc.decode(), [[0.0, -5.0], [3.0, 0.0]])
        assert np.array_equal(res, [[1.0, 0.0], [0.0, 0.5]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ef_wrap(EXAMPLE, np.zeros((3, 3)), CompressorSpec.topk(50.0))


class TestCollective:
    def test_none_average(self):
        a, b = np.random.default_rng(3).standard_normal((2, 3, 3))
        out, stats = collective_reduce([encode(a, CompressorSpec()), encode(b, CompressorSpec())], CompressorSpec())
        assert np.array_equal(out, (a + b) / 2)
        assert stats.collective == "ring_allreduce" and stats.sent_bytes == [Fraction(36)] * 2

    def test_quant_constant_exact(self):
        spec = CompressorSpec.quant(4)
        xs = [np.full((2, 2), v) for v in (1.0, 2.0, 4.5)]
        out, stats = collective_reduce([encode(x, spec) for x in xs], spec)
        assert np.array_equal(out, np.full((2, 2), 2.5)) and stats.stages == 2

    def test_quant_two_stage_error_bound(self):
        rng = np.random.default_rng(4)
        spec = CompressorSpec.quant(8)
        xs = [rng.uniform(-1, 1, (8, 8)) for _ in range(8)]
        encoded = [encode(x, spec) for x in xs]
        out, _ = collective_reduce(encoded, spec)
        true = sum(xs) / 8
        stage1 = max((x.max() - x.min()) / 255 / 2 for x in xs)
        dequant = sum(e.decode() for e in encoded) / 8
        stage2 = (dequant.max() - dequant.min()) / 255 / 2
        assert np.abs(out - true).max() <= stage1 + stage2 + 1e-15

    def test_topk_allgather_bytes(self):
        spec = CompressorSpec.topk(25.0)
        enc = [encode(np.eye(4) * (i + 1), spec) for i in range(3)]
        _, stats = collective_reduce(enc, spec)
        assert stats.collective == "allgather"
        assert stats.sent_bytes == [Fraction(2 * 18)] * 3

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            collective_reduce([encode(np.eye(2), CompressorSpec()), encode(np.eye(3), CompressorSpec())],
                              CompressorSpec())


class TestCommBytes:
    def test_examples(self):
        assert comm_bytes(CompressorSpec(), (4, 4), 2)["payload"] == 64
        q = comm_bytes(CompressorSpec.quant(4), (4, 4), 2)
        assert (q["payload"] - q["metadata"], q["metadata"]) == (8, 8)
        assert comm_bytes(CompressorSpec.topk(25.0), (4, 4), 2)["payload"] == 18

    def test_rowwise_metadata(self):
        q = comm_bytes(CompressorSpec.quant(2, granularity="rowwise"), (5, 3), 4)
        assert q["metadata"] == 5 * 2 * 4

    @given(matrices, st.sampled_from([CompressorSpec(), CompressorSpec.topk(30.0), CompressorSpec.quant(4),
                                      CompressorSpec.quant(2, "statistical", "rowwise")]), st.integers(1, 8))
    def test_matches_encoder(self, x, spec, k):
        assert comm_bytes(spec, x.shape, k)["payload"] == encode(x, spec).logical_bytes


@pytest.mark.parametrize("kwargs", [dict(kind="zip"), dict(kind="topk"), dict(kind="topk", k_pct=120.0),
                                    dict(kind="quant", bits=3, scheme="linear", granularity="global"),
                                    dict(kind="none", bits=4), dict(ef_beta=1.5)])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        CompressorSpec(**kwargs)
