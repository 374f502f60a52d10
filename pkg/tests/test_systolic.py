import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shieldsim import kernels
from shieldsim.errors import ConfigurationError
from shieldsim.numerics import DType, round_to, wrap_int32
from shieldsim.systolic import (INT8_D, INT8_I, ArrayFaults, ArrayGeometry, ArrayStatus, Mode,
                                ShieldChecksums, adder_depth_term, component_latencies,
                                configure_shields, gemm, minimum_shields, numeric_sums,
                                pipeline_schedule, shield_checksums, shield_latency,
                                shield_verify, transpose_stream)

A2 = np.array([[1, 2], [3, 4]])
B2 = np.array([[5, 6], [7, 8]])
Z2 = np.zeros((2, 2), int)


def eq1_oracle(i, j, k):
    """Shield latency by direct evaluation with real-valued logs."""
    depth = math.floor((1 / j) * math.log2(math.ceil(i * j / 2 ** j))) if i * j > 2 ** j else 0
    return math.ceil(2 * i * j / k) + 1 + depth + 1


def eq2_oracle(i, j):
    depth = math.floor((1 / j) * math.log2(math.ceil(i * j / 2 ** j))) if i * j > 2 ** j else 0
    denom = i * j + 2 * i - 3 - depth
    return None if denom <= 0 else math.ceil(2 * i * j / denom)


def brute_sums(a, b, d):
    c = np.asarray(a, np.int64) @ np.asarray(b, np.int64) + np.asarray(d, np.int64)
    return c.sum(axis=1), c.sum(axis=0)


def rand_operands(rng, n, dtype):
    if dtype is DType.INT8:
        return (rng.integers(-128, 128, (n, n)), rng.integers(-128, 128, (n, n)),
                rng.integers(-2 ** 20, 2 ** 20, (n, n)))
    return (round_to(rng.normal(size=(n, n)), dtype), round_to(rng.normal(size=(n, n)), dtype),
            rng.normal(size=(n, n)).astype(np.float32))


def checks_for(a, b, d, dtype):
    if dtype is DType.INT8:
        dr, dc = numeric_sums(d, dtype)
        return shield_checksums(a, b, dr, dc, dtype)
    d64 = np.asarray(d, np.float64)
    return shield_checksums(a, b, d64.sum(1), d64.sum(0), dtype,
                            (np.abs(d64).sum(1), np.abs(d64).sum(0)))


class TestGemm:
    def test_examples(self):
        assert gemm(A2, B2, Z2).tolist() == [[19, 22], [43, 50]]
        assert gemm(A2, B2, np.eye(2, dtype=int)).tolist() == [[20, 22], [43, 51]]

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            gemm(np.zeros((2, 3)), B2, Z2)
        with pytest.raises(ValueError):
            gemm(A2, B2, Z2, geometry=ArrayGeometry(4, 1))

    def test_stuck_at_one_on_output_pe(self):
        rng = np.random.default_rng(0)
        n = 4
        a, b = rng.integers(-128, 128, (n, n)), rng.integers(-128, 128, (n, n))
        ref = gemm(a, b, np.zeros((n, n), int))
        f = ArrayFaults.empty(n)
        f.psum_or[n - 1, 0] = 1       # WS: last PE of column 0 emits C[:, 0]
        c = gemm(a, b, np.zeros((n, n), int), ArrayGeometry(n, 1), faults=f)
        assert np.all(c[:, 0] % 2 != 0)
        assert np.array_equal(c[:, 0], ref[:, 0] | 1)
        assert np.array_equal(c[:, 1:], ref[:, 1:])

    @pytest.mark.parametrize("mode", list(Mode))
    @pytest.mark.parametrize("dtype", list(DType))
    def test_fault_free_kernel_matches_reference(self, mode, dtype):
        rng = np.random.default_rng(5)
        a, b, d = rand_operands(rng, 8, dtype)
        geo = ArrayGeometry(4, 2, mode)
        clean = gemm(a, b, d, geo, dtype)
        empty = ArrayFaults.empty(8)
        for name in kernels.available_backends():
            k = kernels.get_backend(name)
            if dtype is DType.INT8:
                out = k.array_gemm_int(np.asarray(a, np.int64) & 0xFF, np.asarray(b, np.int64),
                                       np.asarray(d, np.int64), *vars(empty).values(), mode is Mode.WS)
            else:
                bits = np.ascontiguousarray(a, np.float32).view(np.uint32).astype(np.int64)
                out = k.array_gemm_float(bits, np.asarray(b, np.float32), np.asarray(d, np.float32),
                                         *vars(empty).values(), mode is Mode.WS)
            assert np.array_equal(out, clean), name
        if dtype is DType.INT8:
            assert np.array_equal(clean, wrap_int32(np.asarray(a) @ np.asarray(b) + d))

    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from(list(Mode)))
    def test_transient_psum_flip_changes_one_cell(self, seed, mode):
        rng = np.random.default_rng(seed)
        n = 4
        a, b, d = rand_operands(rng, n, DType.INT8)
        i, k, j = rng.integers(n, size=3)
        bit = int(rng.integers(32))
        f = ArrayFaults.empty(n)
        f.psum_xor[i, k, j] = 1 << bit
        ref = gemm(a, b, d)
        c = gemm(a, b, d, ArrayGeometry(n, 1, mode), faults=f)
        diff = np.argwhere(c != ref)
        assert diff.tolist() == [[i, j]]


class TestChecksums:
    def test_example(self):
        chk = shield_checksums(A2, B2, [0, 0], [0, 0])
        assert chk.row_check.tolist() == [41, 93] and chk.col_check.tolist() == [62, 72]
        r, c = brute_sums(A2, B2, Z2)
        assert (r.tolist(), c.tolist()) == ([41, 93], [62, 72])

    def test_zero_a(self):
        d = np.array([[1, 2], [3, 4]])
        chk = shield_checksums(Z2, B2, d.sum(1), d.sum(0))
        assert chk.row_check.tolist() == [3, 7] and chk.col_check.tolist() == [4, 6]

    def test_int8_extremes_do_not_wrap(self):
        n = 16
        a = np.full((n, n), 127)
        chk = shield_checksums(a, a, np.zeros(n, int), np.zeros(n, int))
        assert 16 * 127 ** 2 * 16 < 2 ** 31
        assert np.all(chk.row_check == 16 * 127 ** 2 * 16)
        r, _ = brute_sums(a, a, np.zeros((n, n), int))
        assert np.array_equal(chk.row_check, r)

    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([2, 4, 8, 16]))
    def test_int8_oracle_equivalence(self, seed, n):
        rng = np.random.default_rng(seed)
        a, b, d = rand_operands(rng, n, DType.INT8)
        chk = checks_for(a, b, d, DType.INT8)
        r, c = brute_sums(a, b, d)
        assert np.array_equal(chk.row_check, wrap_int32(r))
        assert np.array_equal(chk.col_check, wrap_int32(c))

    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([2, 4, 8, 16]),
           st.sampled_from([DType.FP32, DType.BF16]))
    def test_float_oracle_equivalence(self, seed, n, dtype):
        rng = np.random.default_rng(seed)
        a, b, d = rand_operands(rng, n, dtype)
        chk = checks_for(a, b, d, dtype)
        c = np.asarray(a, np.float64) @ np.asarray(b, np.float64) + np.asarray(d, np.float64)
        for got, want in ((chk.row_check, c.sum(1)), (chk.col_check, c.sum(0))):
            assert np.all(np.abs(got - want) <= 1e-4 * np.maximum(np.abs(want), 1.0))

    def test_transpose(self):
        assert np.array_equal(transpose_stream(np.eye(3)), np.eye(3))
        assert transpose_stream(A2).tolist() == [[1, 3], [2, 4]]
        rng = np.random.default_rng(0)
        for _ in range(100):
            b = rng.integers(-9, 9, (5, 5))
            assert np.array_equal(transpose_stream(transpose_stream(b)), b)
        _, (row_sums, col_sums) = transpose_stream(B2, with_checksums=True)
        assert row_sums.tolist() == [11, 15] and col_sums.tolist() == [12, 14]


class TestVerify:
    def test_clean(self):
        c = gemm(A2, B2, Z2)
        out = shield_verify(c, shield_checksums(A2, B2, [0, 0], [0, 0]))
        assert out.status is ArrayStatus.CLEAN and not out.detected

    def test_plus_five_example(self):
        c = gemm(A2, B2, Z2)
        c[0, 1] += 5
        out = shield_verify(c, shield_checksums(A2, B2, [0, 0], [0, 0]), latency=68)
        assert out.row_deltas == {0: -5} and out.col_deltas == {1: -5}
        assert out.status is ArrayStatus.CORRECTED and out.corrections == [(0, 1, -5)]
        assert c.tolist() == [[19, 22], [43, 50]]
        assert out.detection_latency_cycles == 68

    def test_exhaustive_single_cell(self):
        rng = np.random.default_rng(1)
        a, b, d = rand_operands(rng, 4, DType.INT8)
        ref = gemm(a, b, d)
        chk = checks_for(a, b, d, DType.INT8)
        for i in range(4):
            for j in range(4):
                for delta in (1, -1, 7, -128, 1 << 16, -(1 << 20), 1 << 30, -(1 << 31)):
                    c = ref.copy()
                    c[i, j] = wrap_int32(c[i, j] + delta)
                    out = shield_verify(c, chk)
                    assert out.status is ArrayStatus.CORRECTED
                    assert np.array_equal(c, ref)

    def test_two_cells_distinct_rows_and_columns(self):
        rng = np.random.default_rng(2)
        a, b, d = rand_operands(rng, 4, DType.INT8)
        ref = gemm(a, b, d)
        c = ref.copy()
        c[0, 1] += 4
        c[2, 3] -= 1024
        assert shield_verify(c, checks_for(a, b, d, DType.INT8)).status is ArrayStatus.CORRECTED
        assert np.array_equal(c, ref)

    def test_one_row_several_cells(self):
        # an activation flip in WS corrupts one row from its column rightward
        rng = np.random.default_rng(3)
        a, b, d = rand_operands(rng, 8, DType.INT8)
        f = ArrayFaults.empty(8)
        f.act_xor[5, 2, 3] = 1 << 6
        c = gemm(a, b, d, ArrayGeometry(8, 1), faults=f)
        ref = gemm(a, b, d)
        assert set(np.flatnonzero((c != ref).any(axis=0))) <= set(range(3, 8))
        assert shield_verify(c, checks_for(a, b, d, DType.INT8)).status is ArrayStatus.CORRECTED
        assert np.array_equal(c, ref)

    def test_peels_cell_then_corrects_line(self):
        rng = np.random.default_rng(4)
        a, b, d = rand_operands(rng, 8, DType.INT8)
        ref = gemm(a, b, d)
        c = ref.copy()
        c[1, 4] += 3
        c[1, 6] += 9
        c[6, 0] -= 64
        assert shield_verify(c, checks_for(a, b, d, DType.INT8)).status is ArrayStatus.CORRECTED
        assert np.array_equal(c, ref)

    @pytest.mark.parametrize("seed", range(10))
    def test_ws_stuck_input_localised_to_tile(self, seed):
        rng = np.random.default_rng(seed)
        geo = ArrayGeometry(4, 1, Mode.WS)
        a, b, d = rand_operands(rng, 4, DType.INT8)
        f = ArrayFaults.empty(4)
        f.act_or[:, 2] = 1 << 6           # every activation entering PE column 2
        c = gemm(a, b, d, geo, faults=f)
        ref = gemm(a, b, d)
        bad_cols = sorted(set(np.argwhere(c != ref)[:, 1]))
        assert bad_cols and bad_cols[0] == 2 and set(bad_cols) <= {2, 3}
        out = shield_verify(c, checks_for(a, b, d, DType.INT8), geo)
        if len(set(np.argwhere(c != ref)[:, 0])) > 1 and len(bad_cols) > 1:
            assert out.status is ArrayStatus.TILE_FAULT and out.tile == (2,)
        assert out.status is not ArrayStatus.CORRECTED or np.array_equal(c, ref)

    def test_os_persistent_fault_tile(self):
        geo = ArrayGeometry(4, 2, Mode.OS)
        rng = np.random.default_rng(9)
        a, b, d = rand_operands(rng, 8, DType.INT8)
        f = ArrayFaults.empty(8)
        f.act_or[3, 4] = 1 << 5           # OS: row of PEs 3 carries A[3, :] through columns 4..7
        f.act_or[5, 4] = 1 << 5
        c = gemm(a, b, d, geo, faults=f)
        out = shield_verify(c, checks_for(a, b, d, DType.INT8), geo)
        assert out.status is ArrayStatus.TILE_FAULT
        assert out.tile == (1, 2)

    def test_one_axis_only_is_uncorrectable(self):
        c = gemm(A2, B2, Z2)
        chk = shield_checksums(A2, B2, [0, 0], [0, 0])
        chk.row_check[0] += 1
        before = c.copy()
        assert shield_verify(c, chk).status is ArrayStatus.UNCORRECTABLE
        assert np.array_equal(c, before)

    @pytest.mark.parametrize("dtype", [DType.FP32, DType.BF16])
    def test_float_single_cell(self, dtype):
        rng = np.random.default_rng(6)
        a, b, d = rand_operands(rng, 8, dtype)
        ref = gemm(a, b, d, dtype=dtype)
        chk = checks_for(a, b, d, dtype)
        assert shield_verify(ref.copy(), chk, dtype=dtype).status is ArrayStatus.CLEAN
        c = ref.copy()
        c[2, 5] = np.float32(np.uint32(c[2, 5].view(np.uint32) ^ np.uint32(1 << 30)).view(np.float32))
        out = shield_verify(c, chk, dtype=dtype)
        assert out.status is ArrayStatus.CORRECTED
        assert abs(float(c[2, 5]) - float(ref[2, 5])) <= 2 ** -10 * max(abs(float(ref[2, 5])), 1.0)

    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([DType.FP32, DType.BF16]))
    def test_float_no_false_positives(self, seed, dtype):
        rng = np.random.default_rng(seed)
        a, b, d = rand_operands(rng, 16, dtype)
        for mode in Mode:
            c = gemm(a, b, d, ArrayGeometry(16, 1, mode), dtype)
            assert shield_verify(c, checks_for(a, b, d, dtype), dtype=dtype).status is ArrayStatus.CLEAN

    @given(st.integers(0, 2 ** 32 - 1))
    def test_corrected_implies_reverification(self, seed):
        rng = np.random.default_rng(seed)
        a, b, d = rand_operands(rng, 4, DType.INT8)
        chk = checks_for(a, b, d, DType.INT8)
        c = gemm(a, b, d)
        for _ in range(rng.integers(1, 4)):
            i, j = rng.integers(4, size=2)
            c[i, j] = wrap_int32(c[i, j] ^ (1 << int(rng.integers(32))))
        out = shield_verify(c, chk)
        if out.status is ArrayStatus.CORRECTED:
            assert shield_verify(c.copy(), chk).status is ArrayStatus.CLEAN


class TestSizing:
    def test_int8_d(self):
        cfg = configure_shields(INT8_D)
        assert (cfg.shields, cfg.sigma, cfg.array_window) == (1, 37, 47)
        assert adder_depth_term(INT8_D) == 3 and cfg.tree_depth == 4

    def test_int8_i(self):
        cfg = configure_shields(INT8_I)
        assert (cfg.shields, cfg.sigma, cfg.array_window) == (2, 130, 191)
        assert adder_depth_term(INT8_I) == 0 and cfg.tree_depth == 1

    def test_degenerate(self):
        with pytest.raises(ConfigurationError):
            configure_shields(ArrayGeometry(1, 1))
        with pytest.raises(ConfigurationError):
            ArrayGeometry(0, 4)

    def test_grid_against_direct_evaluation(self):
        for i in range(1, 33):
            for j in range(1, 9):
                geo = ArrayGeometry(i, j)
                k = eq2_oracle(i, j)
                if k is None:
                    with pytest.raises(ConfigurationError):
                        minimum_shields(geo)
                    continue
                assert minimum_shields(geo) == k
                cfg = configure_shields(geo)
                assert cfg.sigma == eq1_oracle(i, j, k) == shield_latency(geo, k)
                assert cfg.sigma <= cfg.array_window == i * j + 2 * i - 1
                assert k == 1 or eq1_oracle(i, j, k - 1) > cfg.array_window
                assert cfg.stage_tree_depth <= j


class TestTiming:
    def test_example_ten_groups(self):
        t = pipeline_schedule(10, configure_shields(INT8_D))
        assert (t.baseline_cycles, t.protected_cycles) == (630, 16 + 10 * 63 + 21)
        assert t.slowdown == pytest.approx(667 / 630)

    def test_limits(self):
        for geo in (INT8_D, INT8_I):
            cfg = configure_shields(geo)
            s = [pipeline_schedule(g, cfg).slowdown for g in (1, 2, 8, 32, 1000, 10 ** 6)]
            assert s == sorted(s, reverse=True)
            assert s[-1] == pytest.approx(1.0, abs=1e-5)
        with pytest.raises(ValueError):
            pipeline_schedule(0, configure_shields(INT8_D))

    def test_stage_model_by_hand(self):
        # S1 = S2 = N, S3 = max(L, sigma), S4 = N / K + tree_depth + 1
        for geo, (s3, s4) in ((INT8_D, (47, 16 + 4 + 1)), (INT8_I, (191, 64 + 1 + 1))):
            t = pipeline_schedule(32, configure_shields(geo))
            n = geo.n
            assert t.protected_cycles == n + 32 * (n + s3) + s4
            assert t.worst_detection_latency_cycles == s3 + s4

    def test_component_latencies(self):
        assert component_latencies(configure_shields(INT8_D)) == \
            {"register": 1, "memory": 16 + 4 + 1 + 1, "array": 68, "nonlinear": 4 + 2}
        assert component_latencies(configure_shields(INT8_I)) == \
            {"register": 1, "memory": 128 + 7 + 1 + 1, "array": 257, "nonlinear": 7 + 2}

    def test_json(self):
        doc = pipeline_schedule(4, configure_shields(INT8_D)).to_json()
        assert '"protected_cycles": ' in doc and '"slowdown": ' in doc
