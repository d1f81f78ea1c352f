import math

import numpy as np
import pytest

from permfl import secenv
from permfl.compress import sample_assignment
from permfl.engine import (
    Algorithm,
    ProtocolError,
    RunConfig,
    TuningFailure,
    init_state,
    message_bytes,
    round_traffic,
    run,
    run_round,
    run_round_baseline,
    run_round_permk_aes,
    tune_step_size,
)
from permfl.numkit import ClientData, Precision, Problem, generate_problem, gradient, objective_and_gradnorm


@pytest.fixture(scope="module")
def desk():
    return generate_problem(1, 100, 10, 5)


def scalar_problem():
    return Problem((ClientData(np.array([[2.0]]), np.array([0.0])),), 8.0)


def test_hand_step():
    res = run(scalar_problem(), RunConfig("gd", 0.1, 1), x0=np.array([1.0]))
    assert res.x[0] == pytest.approx(0.2, abs=1e-15)


def test_fixed_point_unchanged(desk):
    st = init_state(desk, RunConfig("gd", 0.1, 1), x0=np.asarray(desk.x_fixed))
    m = run_round_baseline(st)
    assert np.array_equal(st.x, desk.x_fixed) and m.grad_norm_sq == 0.0


def test_gd_monotone_at_one_over_l(desk):
    res = run(desk, RunConfig("gd", 1 / desk.l_smooth, 300))
    gn = res.grad_norms
    assert np.all(np.diff(gn) <= 0)
    fx = np.array([m.fx for m in res.metrics])
    assert np.all(np.diff(fx) <= 0)


@pytest.mark.parametrize("plain", ["gd", "dcgd_randk", "dcgd_permk"])
def test_trajectory_equality_with_encryption(desk, plain):
    kw = dict(k=10, compressor_seed=4)
    a = run(desk, RunConfig(plain, 0.02, 25, **kw), record_iterates=True)
    b = run(desk, RunConfig(plain + "_aes", 0.02, 25, **kw), record_iterates=True)
    for x, y in zip(a.iterates, b.iterates):
        assert np.array_equal(x, y)


def test_replicas_identical(desk):
    st = init_state(desk, RunConfig("dcgd_permk_aes", 0.02, 5))
    for _ in range(5):
        run_round_permk_aes(st)
        assert all(np.array_equal(c.x, st.x) for c in st.clients)


def test_one_round_permk_oracle(desk):
    gamma = 0.03
    x0 = np.linspace(-1, 1, 100)
    st = init_state(desk, RunConfig("dcgd_permk_aes", gamma, 1, compressor_seed=8), x0=x0)
    run_round(st)
    a = sample_assignment(100, 10, 8, 0)
    expected = x0.copy()
    for i, b in enumerate(a.buckets):
        expected[b] = x0[b] - gamma * gradient(desk, i, x0)[b]
    assert np.allclose(st.x, expected, rtol=0, atol=1e-15)


def test_traffic_formulas():
    p = generate_problem(0, 1000, 50, 12)
    st = init_state(p, RunConfig("gd_aes", 0.1, 1))
    m = run_round(st)
    assert m.down_bytes[0] == 50 * (8000 + 32 + 21) == 402_650
    assert m.down_nominal_bytes[0] == 8000 * 50 + 32 * 50
    st = init_state(p, RunConfig("dcgd_permk_aes", 0.01, 1, Precision.FP32))
    m = run_round(st)
    assert set(m.up_bytes) == {20 * 4 + 32 + 21} == {133}
    assert m.down_bytes[0] == 50 * 133
    st = init_state(p, RunConfig("gd", 0.1, 1))
    m = run_round(st)
    assert m.up_bytes == (8000,) * 50 and m.down_bytes == (8000,) * 50


def test_byte_counts_match_closed_form_every_round(desk):
    for alg in ["dcgd_permk", "dcgd_permk_aes", "dcgd_randk_aes", "gd_aes"]:
        res = run(desk, RunConfig(alg, 0.02, 5, k=7))
        counts = [10] * 10 if "permk" in alg else ([7] * 10 if "randk" in alg else [100] * 10)
        t = round_traffic(Algorithm(alg), 100, Precision.FP64, counts)
        for m in res.metrics:
            assert m.up_bytes == t.up and m.down_bytes == t.down and m.up_nominal_bytes == t.up_nominal


def test_message_bytes_full_scale():
    assert message_bytes("fedavg", 11_181_642, 10, "fp32") == 44_726_568
    assert message_bytes("dcgd_permk_aes", 11_181_642, 10, "fp32") == 1_118_165 * 4 + 32
    assert message_bytes("dcgd_permk_aes", 11_181_642, 10, "fp32", headers=True) == 1_118_165 * 4 + 53


def test_fedavg_single_step_is_gd():
    p = generate_problem(2, 20, 1, 5)
    a = run(p, RunConfig("gd", 0.05, 20), record_iterates=True)
    b = run(p, RunConfig("fedavg", 0.05, 20, local_steps=1), record_iterates=True)
    for x, y in zip(a.iterates, b.iterates):
        assert np.array_equal(x, y)


def test_fedavg_close_to_gd_multi_client(desk):
    a = run(desk, RunConfig("gd", 0.05, 10))
    b = run(desk, RunConfig("fedavg", 0.05, 10))
    assert np.allclose(a.x, b.x, rtol=1e-12, atol=1e-14)


def test_fedavg_local_steps_make_progress(desk):
    res = run(desk, RunConfig("fedavg", 0.05, 50, local_steps=3, local_gamma=0.02))
    assert res.metrics[-1].grad_norm_sq < res.metrics[0].grad_norm_sq


def test_tampering_halts(desk):
    st = init_state(desk, RunConfig("dcgd_permk_aes", 0.02, 3))

    def flip(envs):
        e = envs[3]
        ct = bytearray(e.ciphertext)
        ct[0] ^= 1
        envs[3] = secenv.Envelope(e.header, e.nonce, e.tag, bytes(ct))
        return envs

    with pytest.raises(secenv.AuthFailure):
        run_round(st, tamper=flip)


def test_replayed_envelope_rejected(desk):
    st = init_state(desk, RunConfig("gd_aes", 0.02, 3))
    old = []
    run_round(st, tamper=lambda envs: old.extend(envs) or envs)
    with pytest.raises(secenv.ReplayError):
        run_round(st, tamper=lambda envs: old)


def test_duplicate_block_is_protocol_violation(desk):
    st = init_state(desk, RunConfig("dcgd_permk_aes", 0.02, 1))
    with pytest.raises((ProtocolError, secenv.ReplayError)):
        run_round(st, tamper=lambda envs: envs[:-1] + envs[:1])


def test_divergence_flag_and_stop(desk):
    res = run(desk, RunConfig("gd", 1.0, 500))
    assert res.diverged and len(res.metrics) < 500
    assert res.metrics[-1].diverged


def test_stop_below(desk):
    res = run(desk, RunConfig("gd", 0.1, 2000), stop_below=1e-10)
    assert res.metrics[-1].grad_norm_sq <= 1e-10 and len(res.metrics) < 2000


def test_precision_runs(desk):
    for prec in Precision:
        res = run(desk, RunConfig("dcgd_permk_aes", 0.02, 30, prec))
        assert res.x.dtype == prec.work_dtype
        assert res.metrics[-1].up_bytes[0] == 10 * prec.nbytes + 53
        assert not res.diverged


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig("gd", 0.0, 1)
    with pytest.raises(ValueError):
        RunConfig("gd", 0.1, 0)
    with pytest.raises(ValueError):
        RunConfig("dcgd_randk", 0.1, 1)
    with pytest.raises(ValueError):
        RunConfig("nope", 0.1, 1)


def test_permk_requires_d_at_least_n():
    p = generate_problem(0, 3, 5, 1)
    with pytest.raises(ValueError):
        init_state(p, RunConfig("dcgd_permk", 0.1, 1))


def test_tune_picks_converging_gamma(desk):
    rep = tune_step_size(desk, Algorithm.GD, [0.25, 0.1, 0.05], 200, [0])
    assert rep.diverged(0.25) and not rep.diverged(0.1)
    assert rep.best_gamma == 0.1


def test_tune_theoretical_step_never_diverges():
    rep = tune_step_size(lambda s: generate_problem(s, 60, 6, 5), Algorithm.GD, [0.1], 300, range(5))
    assert not rep.diverged(0.1)


def test_tune_all_diverge():
    with pytest.raises(TuningFailure):
        tune_step_size(generate_problem(0, 30, 3, 5), Algorithm.GD, [1.0, 2.0], 200, [0])
    with pytest.raises(ValueError):
        tune_step_size(generate_problem(0, 30, 3, 5), Algorithm.GD, [], 10, [0])


def test_tune_seed_spread_small(desk):
    # one instance, five compressor seeds
    rep = tune_step_size(desk, Algorithm.DCGD_PERMK, [0.007], 1500, range(5))
    finals = [e.final_grad_norm_sq for e in rep.entries]
    assert max(finals) / min(finals) < 100


def test_metrics_row_shape(desk):
    from permfl.engine import RoundMetrics

    m = run(desk, RunConfig("gd_aes", 0.1, 1)).metrics[0]
    row = m.csv_row()
    assert len(row) == len(RoundMetrics.CSV_COLUMNS)
    assert row[3] == 10 * (800 + 53) and math.isfinite(float(row[1]))
