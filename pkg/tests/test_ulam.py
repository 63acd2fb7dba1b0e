import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tfilter.errors import EmptyRowError, MatrixHeaderError
from tfilter.harness import fit_loglog_slope
from tfilter.partition import Domain, build_uniform_partition
from tfilter.sde import RngStream, benes_model, identity_model, lorenz63_model, ou_model, shift_model
from tfilter.ulam import (
    TransitionMatrix,
    estimate_transition_matrix,
    gaussian_kernel_matrix,
    load_matrix,
    max_entry_deviation,
    mc_convergence_check,
    model_kernel_matrix,
    save_matrix,
)


def _line(lo, hi, n):
    return build_uniform_partition(Domain([lo], [hi]), [n])


def test_identity_flow_gives_identity():
    p = _line(0, 1, 10)
    tm = estimate_transition_matrix(p, identity_model(), 1.0, 20, rng=0)
    assert np.array_equal(tm.dense(), np.eye(10))


def test_half_shift_swaps_boxes():
    p = _line(0, 1, 2)
    tm = estimate_transition_matrix(p, shift_model(0.5), 1.0, 50, rng=0)
    assert np.array_equal(tm.dense(), [[0.0, 1.0], [1.0, 0.0]])


@given(st.integers(0, 10_000), st.integers(5, 30), st.integers(5, 40))
def test_estimates_are_row_stochastic(seed, n_boxes, n_samples):
    p = _line(-5, 5, n_boxes)
    P = estimate_transition_matrix(p, benes_model(), 0.3, n_samples, rng=seed, out_of_domain="absorb").dense()
    assert np.all(P >= 0) and np.allclose(P.sum(axis=1), 1.0, atol=1e-12)


def test_worker_count_does_not_change_result():
    p = _line(-5, 5, 30)
    a = estimate_transition_matrix(p, benes_model(), 0.3, 40, rng=RngStream(5))
    b = estimate_transition_matrix(p, benes_model(), 0.3, 40, rng=RngStream(5), workers=4)
    assert np.array_equal(a.dense(), b.dense())


def test_empty_row_raises():
    p = _line(0, 1, 4)
    with pytest.raises(EmptyRowError):
        estimate_transition_matrix(p, shift_model(5.0, period=100.0), 1.0, 10, rng=0)


def test_absorb_keeps_rows_stochastic():
    p = _line(0, 1, 4)
    tm = estimate_transition_matrix(p, shift_model(5.0, period=100.0), 1.0, 10, rng=0, out_of_domain="absorb")
    assert np.allclose(tm.dense()[:, -1], 1.0)


def test_quadrature_matches_monte_carlo_within_four_standard_errors():
    p = _line(-6, 6, 100)
    quad = gaussian_kernel_matrix(p, [[np.exp(-0.05)]], [0.0], [[np.exp(-0.1)]]).dense()
    mc = estimate_transition_matrix(p, ou_model(0.5), 0.1, 10_000, rng=RngStream(2))
    se = mc.standard_errors()
    # entries with no MC hits have zero standard error; use the binomial floor there
    floor = np.sqrt(quad * (1 - quad) / 10_000)
    assert np.all(np.abs(mc.dense() - quad) <= 4 * np.maximum(se, floor) + 1e-3 / 10_000 ** 0.5)


def test_model_kernel_matches_explicit_kernel():
    p = _line(-6, 6, 60)
    a = model_kernel_matrix(p, ou_model(0.5), 0.1)
    b = gaussian_kernel_matrix(p, [[np.exp(-0.05)]], [0.0], [[np.exp(-0.1)]])
    assert max_entry_deviation(a, b) < 1e-14


def test_mc_rate_slope():
    p = _line(-6, 6, 20)
    ref = gaussian_kernel_matrix(p, [[np.exp(-0.05)]], [0.0], [[np.exp(-0.1)]])
    ns = [200, 400, 800, 1600, 3200]
    devs = []
    for seed in range(10):
        table = mc_convergence_check(p, ou_model(0.5), 0.1, ns, rng=seed, reference=ref)
        devs.append([row["deviation"] for row in table])
    slope, _ = fit_loglog_slope(ns, np.mean(devs, axis=0))
    assert -0.7 <= slope <= -0.3


def test_mc_check_without_reference_hits_zero_at_largest_n():
    p = _line(-6, 6, 10)
    table = mc_convergence_check(p, ou_model(), 0.1, [50, 100], rng=1)
    assert table[-1]["deviation"] == 0.0


def test_save_load_roundtrip_bytes(tmp_path):
    p = _line(-6, 6, 40)
    tm = estimate_transition_matrix(p, ou_model(), 0.1, 50, rng=3)
    f1, f2 = tmp_path / "a.pfo", tmp_path / "b.pfo"
    save_matrix(tm, f1)
    back = load_matrix(f1, p)
    save_matrix(back, f2)
    assert f1.read_bytes() == f2.read_bytes()
    assert np.array_equal(back.dense(), tm.dense())


def test_sparse_roundtrip(tmp_path):
    p = build_uniform_partition(Domain([-25, -25, -30], [25, 25, 20]), [6, 6, 6])
    tm = estimate_transition_matrix(
        p, lorenz63_model(), 0.02, 20, substeps=2, rng=0, out_of_domain="absorb", sparse_threshold=100
    )
    assert tm.is_sparse
    f = tmp_path / "s.pfo"
    save_matrix(tm, f)
    back = load_matrix(f, p)
    assert back.is_sparse and (back.matrix != tm.matrix).nnz == 0


def test_load_with_wrong_partition_names_sizes(tmp_path):
    p = _line(-6, 6, 40)
    tm = estimate_transition_matrix(p, ou_model(), 0.1, 20, rng=3)
    save_matrix(tm, tmp_path / "a.pfo")
    with pytest.raises(MatrixHeaderError, match="40.*50|50.*40"):
        load_matrix(tmp_path / "a.pfo", _line(-6, 6, 50))


def test_bad_magic(tmp_path):
    f = tmp_path / "junk.pfo"
    f.write_bytes(b"not a matrix at all")
    with pytest.raises(MatrixHeaderError):
        load_matrix(f)


def test_non_stochastic_matrix_rejected():
    with pytest.raises(ValueError):
        TransitionMatrix(np.array([[0.5, 0.4], [0.0, 1.0]]), _line(0, 1, 2))
