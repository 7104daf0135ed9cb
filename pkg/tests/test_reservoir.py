import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse

from rcecg.reservoir import (
    ReservoirParams,
    ReservoirWeights,
    SpectralRadiusError,
    build_reservoir,
    estimate_spectral_radius,
    harvest,
    load_reservoir_sidecar,
    reservoir_sidecar,
    step,
)


def dense_radius(W):
    return float(np.max(np.abs(np.linalg.eigvals(W.toarray() if sparse.issparse(W) else W))))


@pytest.fixture(scope="module")
def table_reservoir():
    return build_reservoir(ReservoirParams(seed=1))


def hand_weights(W, W_in, alpha=0.5):
    params = ReservoirParams(size=W.shape[0], connections_per_node=1, leakage_rate=alpha, washout=0)
    return ReservoirWeights(sparse.csr_matrix(W), np.asarray(W_in, float), sparse.csr_matrix((W.shape[0], 1)),
                            dense_radius(W), 0, params)


class TestSpectralRadius:
    def test_diagonal(self):
        assert estimate_spectral_radius(sparse.diags([0.5, -0.9])) == pytest.approx(0.9, rel=1e-8)

    def test_rotation(self):
        W = sparse.csr_matrix(np.array([[0.0, 1.0], [-1.0, 0.0]]))
        assert estimate_spectral_radius(W) == pytest.approx(1.0, rel=1e-8)

    def test_zero(self):
        assert estimate_spectral_radius(sparse.csr_matrix((5, 5))) == 0.0

    @pytest.mark.parametrize("block_size", [1, 2, 4])
    def test_iterative_path_embedded_cases(self, block_size):
        pad = sparse.diags(np.linspace(0.1, 0.4, 16))
        diag = sparse.block_diag([sparse.diags([0.5, -0.9]), pad])
        rot = sparse.block_diag([sparse.csr_matrix([[0.0, 1.0], [-1.0, 0.0]]), pad])
        assert estimate_spectral_radius(diag, block_size=block_size) == pytest.approx(0.9, rel=1e-7)
        if block_size >= 2:
            # a complex dominant pair needs at least a two-dimensional block
            assert estimate_spectral_radius(rot, block_size=block_size) == pytest.approx(1.0, rel=1e-8)
        assert estimate_spectral_radius(sparse.csr_matrix((20, 20)), block_size=block_size) == 0.0

    def test_not_square(self):
        with pytest.raises(ValueError):
            estimate_spectral_radius(np.zeros((2, 3)))

    def test_non_convergence_reports_estimates(self):
        W = sparse.random(200, 200, density=0.05, random_state=0)
        with pytest.raises(SpectralRadiusError) as info:
            estimate_spectral_radius(W, tol=1e-30, max_iters=3)
        assert len(info.value.last_estimates) == 2

    @pytest.mark.parametrize("n", [8, 64, 768])
    def test_scaled_radius_matches_dense_eigensolver(self, n):
        k = min(10, n - 1)
        w = build_reservoir(ReservoirParams(size=n, connections_per_node=k, seed=11))
        assert dense_radius(w.W) == pytest.approx(0.99, rel=1e-6)
        assert w.achieved_spectral_radius == pytest.approx(0.99, rel=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(3, 40))
    def test_random_sparse_against_dense(self, seed, n):
        W = sparse.random(n, n, density=0.3, random_state=seed)
        ref = dense_radius(W)
        assert estimate_spectral_radius(W) == pytest.approx(ref, rel=1e-6, abs=1e-12)


class TestBuild:
    def test_two_unit_closed_form(self):
        w = build_reservoir(ReservoirParams(size=2, connections_per_node=1, seed=5))
        W = w.W.toarray()
        assert np.count_nonzero(W, axis=1).tolist() == [1, 1]
        # off-diagonal 2x2: eigenvalues are +-sqrt(W01 * W10)
        assert math.sqrt(abs(W[0, 1] * W[1, 0])) == pytest.approx(0.99, rel=1e-12)

    def test_deterministic(self):
        p = ReservoirParams(size=100, seed=42)
        a, b = build_reservoir(p), build_reservoir(p)
        assert (a.W != b.W).nnz == 0
        assert np.array_equal(a.W_in, b.W_in)
        assert a.achieved_spectral_radius == b.achieved_spectral_radius

    def test_seed_changes_weights(self):
        a = build_reservoir(ReservoirParams(size=50, seed=1))
        b = build_reservoir(ReservoirParams(size=50, seed=2))
        assert (a.W != b.W).nnz > 0

    def test_table_dimensions(self, table_reservoir):
        w = table_reservoir
        assert w.W.shape == (768, 768)
        assert w.W.nnz == 7680
        assert w.W.nnz / 768**2 == pytest.approx(0.0130, abs=1e-4)
        assert np.all(np.count_nonzero(w.W.toarray(), axis=1) == 10)
        assert np.all(w.W.diagonal() == 0)
        assert w.W_in.shape == (768, 2)
        assert np.all(np.abs(w.W_in) <= 0.5)
        assert w.W_fb.nnz == 0

    def test_raw_recurrent_values_uniform_unit_range(self):
        from rcecg.reservoir import _random_recurrent

        raw = _random_recurrent(768, 10, np.random.default_rng(1))
        assert np.all(np.abs(raw.data) <= 1.0)
        assert raw.data.min() < -0.99 and raw.data.max() > 0.99

    def test_scaling_keeps_pattern(self):
        from rcecg.reservoir import _random_recurrent

        p = ReservoirParams(size=60, seed=9)
        raw = _random_recurrent(60, 10, np.random.default_rng(9))
        w = build_reservoir(p)
        assert np.array_equal(raw.indices, w.W.indices) and np.array_equal(raw.indptr, w.W.indptr)
        np.testing.assert_allclose(w.W.data / raw.data, w.W.data[0] / raw.data[0], rtol=1e-12)

    @pytest.mark.parametrize("bad", [dict(connections_per_node=0), dict(size=10, connections_per_node=10),
                                     dict(leakage_rate=1.5), dict(spectral_radius=0.0), dict(washout=-1)])
    def test_invalid_params(self, bad):
        with pytest.raises(ValueError):
            build_reservoir(ReservoirParams(**bad))

    def test_sidecar_round_trip(self, small_reservoir):
        text = reservoir_sidecar(small_reservoir)
        again = load_reservoir_sidecar(text)
        assert (again.W != small_reservoir.W).nnz == 0
        doc = json.loads(text)
        doc["achieved_spectral_radius"] *= 1.001
        with pytest.raises(ValueError):
            load_reservoir_sidecar(json.dumps(doc))


class TestStep:
    def test_alpha_zero_holds_state(self, small_reservoir, small_params, rng):
        from dataclasses import replace

        p = replace(small_params, leakage_rate=0.0)
        x = rng.uniform(-1, 1, small_params.size)
        assert np.array_equal(step(small_reservoir, p, x, [1.0, 3.0]), x)

    def test_alpha_one_zero_drive(self):
        w = hand_weights(np.zeros((2, 2)), np.eye(2), alpha=1.0)
        assert np.array_equal(step(w, w.params, np.zeros(2), np.zeros(2)), np.zeros(2))

    def test_three_unit_hand_oracle(self):
        W = np.array([[0.0, 0.3, 0.0], [0.0, 0.0, -0.2], [0.5, 0.0, 0.0]])
        W_in = np.array([[0.1, -0.4], [0.25, 0.05], [-0.3, 0.2]])
        w = hand_weights(W, W_in, alpha=0.7)
        u = [1.0, 0.8]
        expected = [0.7 * math.tanh(0.1 - 0.32), 0.7 * math.tanh(0.25 + 0.04), 0.7 * math.tanh(-0.3 + 0.16)]
        np.testing.assert_allclose(step(w, w.params, np.zeros(3), u), expected, rtol=0, atol=1e-12)
        # second step exercises the recurrent and leak terms
        x1 = np.array(expected)
        drive = W @ x1 + W_in @ u
        np.testing.assert_allclose(step(w, w.params, x1, u), 0.3 * x1 + 0.7 * np.tanh(drive), atol=1e-12)

    def test_non_finite_input_index(self, small_reservoir, small_params):
        with pytest.raises(FloatingPointError, match="index 1"):
            step(small_reservoir, small_params, np.zeros(small_params.size), [1.0, np.nan])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30))
    def test_activations_bounded(self, small_reservoir, small_params, ecg):
        x = np.zeros(small_params.size)
        for v in ecg:
            x = step(small_reservoir, small_params, x, [1.0, v])
            assert np.all(np.abs(x) <= 1.0)
            assert np.all(np.isfinite(x))


class TestHarvest:
    def test_matches_repeated_step(self, small_reservoir, small_params, rng):
        ecg = rng.standard_normal(50)
        traj = harvest(small_reservoir, small_params, ecg, washout=10)
        x = np.zeros(small_params.size)
        for t, v in enumerate(ecg):
            x = step(small_reservoir, small_params, x, [1.0, v])
            if t >= 10:
                np.testing.assert_allclose(traj.states[t - 10, :-2], x, atol=1e-14)
        assert traj.Z.shape == (small_params.size + 2, 40)
        assert np.all(traj.Z[-2] == 1.0)
        np.testing.assert_array_equal(traj.Z[-1], ecg[10:])

    def test_washout_leaves_one_column(self, small_reservoir, small_params):
        assert harvest(small_reservoir, small_params, np.zeros(20), washout=19).num_steps == 1

    def test_too_short(self, small_reservoir, small_params):
        with pytest.raises(ValueError):
            harvest(small_reservoir, small_params, np.zeros(5), washout=5)

    def test_zero_input_converges_to_fixed_point(self, small_reservoir, small_params):
        traj = harvest(small_reservoir, small_params, np.zeros(400), washout=0)
        diffs = np.linalg.norm(np.diff(traj.states[:, :-2], axis=0), axis=1)
        tail = diffs[50:]
        assert np.all(np.diff(tail) <= 1e-15)
        x = traj.final_state
        fixed = (1 - small_params.leakage_rate) * x + small_params.leakage_rate * np.tanh(
            small_reservoir.W @ x + small_reservoir.W_in @ [1.0, 0.0])
        assert np.abs(fixed - x).max() < 1e-10

    def test_deterministic(self, small_reservoir, small_params, rng):
        ecg = rng.standard_normal(100)
        a = harvest(small_reservoir, small_params, ecg, washout=0)
        b = harvest(small_reservoir, small_params, ecg, washout=0)
        assert np.array_equal(a.states, b.states)

    def test_continuation(self, small_reservoir, small_params, rng):
        ecg = rng.standard_normal(80)
        whole = harvest(small_reservoir, small_params, ecg, washout=0)
        first = harvest(small_reservoir, small_params, ecg[:30], washout=0)
        rest = harvest(small_reservoir, small_params, ecg[30:], washout=0, x0=first.final_state)
        assert np.array_equal(whole.states[30:], rest.states)

    def test_echo_state_property(self, table_reservoir):
        r = np.random.default_rng(2)
        p = table_reservoir.params
        ecg = r.standard_normal(2000) * 0.5
        xa = r.uniform(-1, 1, p.size)
        xb = r.uniform(-1, 1, p.size)
        a = harvest(table_reservoir, p, ecg, washout=0, x0=xa)
        b = harvest(table_reservoir, p, ecg, washout=0, x0=xb)
        gap = np.abs(a.states - b.states).max(axis=1)
        assert gap[-1] < 1e-6
