import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refrax.blocks import (
    BlockState,
    block_input_current,
    carry_adaptation,
    carry_membrane,
    decay_kernel,
    faulty_spikes,
    first_spike_only,
    init_block_state,
    latent_spike_timing,
    no_reset_membrane,
    run_block,
)
from refrax.params import LayerParams


def recurrence_oracle(current, beta, v0=0.0):
    """Sequential no-reset membrane, the independent reference."""
    v = v0
    out = []
    for i in current:
        v = beta * v + (1.0 - beta) * i
        out.append(v)
    return np.array(out)


def phi_oracle(s):
    """Direct evaluation of z[t] = sum_k s[k] * (t - k + 1)."""
    s = np.asarray(s)
    T = len(s)
    return np.array([sum(s[k] * (t - k + 1) for k in range(t + 1)) for t in range(T)])


# ---------------------------------------------------------------------------
# no-reset membrane


def test_no_reset_membrane_matches_hand_trace():
    out = no_reset_membrane([2.0, 0.0], 0.5, v0=0.0)
    assert out == pytest.approx([1.0, 0.5])


def test_no_reset_membrane_zero_input_zero_init():
    assert not no_reset_membrane(np.zeros(5), 0.7, 0.0).any()


def test_no_reset_membrane_initial_condition_decays():
    # slot-0 encoding v0/(1-beta) = 2 reproduces the decaying initial value
    out = no_reset_membrane([0.0, 0.0], 0.5, v0=1.0)
    assert out == pytest.approx([0.5, 0.25])


def test_no_reset_membrane_rejects_unclamped_beta():
    with pytest.raises(ValueError):
        no_reset_membrane([1.0], 0.995)
    with pytest.raises(ValueError):
        no_reset_membrane([1.0], 0.0)


@given(
    st.integers(min_value=1, max_value=32),
    st.floats(min_value=0.01, max_value=0.99),
    st.floats(min_value=-2.0, max_value=2.0),
    st.integers(min_value=0, max_value=2**31 - 1),
)
@settings(max_examples=60, deadline=None)
def test_no_reset_membrane_agrees_with_recurrence(T, beta, v0, seed):
    current = np.random.default_rng(seed).uniform(-3, 3, T)
    got = no_reset_membrane(current, beta, v0)
    want = recurrence_oracle(current, beta, v0)
    assert np.allclose(got, want, rtol=1e-12, atol=1e-13)


def test_no_reset_membrane_float32_tolerance():
    rng = np.random.default_rng(0)
    current = rng.uniform(-3, 3, 64).astype(np.float32)
    got = no_reset_membrane(current, np.float32(0.9), np.float32(0.5))
    want = recurrence_oracle(current.astype(np.float64), 0.9, 0.5)
    assert np.allclose(got, want, rtol=1e-6, atol=1e-6)


def test_no_reset_membrane_broadcasts_per_neuron():
    rng = np.random.default_rng(1)
    cur = rng.uniform(-1, 1, (2, 3, 8))
    beta = np.array([0.3, 0.6, 0.9])
    v0 = rng.uniform(-1, 1, (2, 3))
    got = no_reset_membrane(cur, beta, v0)
    for b in range(2):
        for n in range(3):
            want = recurrence_oracle(cur[b, n], beta[n], v0[b, n])
            assert np.allclose(got[b, n], want, rtol=1e-12)


# ---------------------------------------------------------------------------
# spike candidate handling


def test_faulty_spikes_elementwise_and_strict():
    assert faulty_spikes([0.5, 1.2, 1.2], np.ones(3)).tolist() == [0, 1, 1]
    assert not faulty_spikes(np.ones(4), np.ones(4)).any()


def test_faulty_spikes_with_decaying_threshold():
    # theta[t] = 1 + d p^t a0 with d=1.8, p=0.9, a0=1 decays from 2.8 toward 1;
    # the first spike appears where it drops below the constant trace 1.5
    t = np.arange(1, 21)
    theta = 1.0 + 1.8 * 0.9**t * 1.0
    v = np.full(20, 1.5)
    s = faulty_spikes(v, theta)
    first = int(np.argmax(theta < 1.5))
    assert s[first] == 1 and not s[:first].any()


def test_latent_timing_examples():
    assert latent_spike_timing([0, 1, 0, 1]).tolist() == [0, 1, 2, 4]
    assert latent_spike_timing([0, 0, 0]).tolist() == [0, 0, 0]
    assert latent_spike_timing([1, 0, 0]).tolist() == [1, 2, 3]


@given(st.lists(st.integers(min_value=0, max_value=1), min_size=1, max_size=24))
@settings(max_examples=80, deadline=None)
def test_latent_timing_matches_direct_sum(bits):
    got = latent_spike_timing(bits)
    assert got.tolist() == phi_oracle(bits).tolist()


def test_first_spike_only_examples():
    assert first_spike_only(np.array([0, 1, 2, 4])).tolist() == [0, 1, 0, 0]
    assert not first_spike_only(np.zeros(4, dtype=int)).any()
    assert first_spike_only(np.array([1, 2, 3])).tolist() == [1, 0, 0]


# ---------------------------------------------------------------------------
# block input current / ARP mask


def neuron_params(n=1, n_in=1, beta=0.5, p=0.9, d=0.0, b=0.0, w=1.0, w_rec=0.0):
    return LayerParams(
        beta=np.full(n, beta),
        p=np.full(n, p),
        d=np.full(n, d),
        b=np.full(n, b),
        w_ff=np.full((n, n_in), w),
        w_rec=np.full((n, n), w_rec),
    )


def test_mask_passes_everything_without_previous_spike():
    lp = neuron_params(b=0.25, w=1.0)
    state = init_block_state(1, 1, 4)
    ff = np.ones((1, 1, 4))
    i = block_input_current(lp, ff, state)
    assert i[0, 0] == pytest.approx([1.25] * 4)


def test_mask_silences_exactly_pre_spike_offsets():
    # spike at offset 2 of a 4-step block: next block's offset 1 is silenced,
    # total refractory coverage = 4 = T_R
    lp = neuron_params(b=1.0, w=0.0)
    state = init_block_state(1, 1, 4)
    state.prev_s = np.array([[[0.0, 1.0, 0.0, 0.0]]])
    state.prev_z = np.array([[[0, 1, 2, 3]]])
    i = block_input_current(lp, np.zeros((1, 1, 4)), state)
    assert i[0, 0].tolist() == [0.0, 1.0, 1.0, 1.0]
    masked = int((i[0, 0] == 0).sum())
    from_spike_onward = 3
    assert masked + from_spike_onward == 4


def test_recurrent_drive_uses_same_block_offset():
    lp = neuron_params(w=0.0, w_rec=2.0)
    state = init_block_state(1, 1, 3)
    state.prev_s = np.array([[[0.0, 1.0, 0.0]]])
    state.prev_z = np.array([[[0, 1, 2]]])
    i = block_input_current(lp, np.zeros((1, 1, 3)), state)
    # offset 1 masked (z=0 < 1), offset 2 carries the delayed spike
    assert i[0, 0].tolist() == [0.0, 2.0, 0.0]


def test_mask_arp1_blocks_step_after_spike():
    lp = neuron_params(b=1.0, w=0.0)
    state = init_block_state(1, 1, 1)
    state.prev_s = np.array([[[1.0]]])
    state.prev_z = np.array([[[1]]])
    i = block_input_current(lp, np.zeros((1, 1, 1)), state)
    assert i[0, 0, 0] == 0.0


def test_block_input_current_shape_mismatch():
    lp = neuron_params()
    state = init_block_state(1, 1, 4)
    with pytest.raises(ValueError):
        block_input_current(lp, np.zeros((1, 2, 4)), state)


# ---------------------------------------------------------------------------
# carries


def test_carry_membrane_cases():
    v_end = np.array([[0.73, 0.5]])
    s = np.zeros((1, 2, 3))
    s[0, 1, 2] = 1.0
    out = carry_membrane(v_end, s)
    assert out[0, 0] == pytest.approx(0.73)
    assert out[0, 1] == 0.0


def adaptation_recurrence_oracle(a0, p, spike_pos, T_R):
    """Eq-style recurrence a[k] = p a[k-1] + s[k-1] across one block, then
    the value at the next block's first step."""
    a = a0
    s_prev = 0.0
    for k in range(1, T_R + 1):
        a = p * a + s_prev
        s_prev = 1.0 if k == spike_pos else 0.0
    return p * a + s_prev  # next block, step 1


def test_carry_adaptation_no_spike_decays():
    a_trace = 1.0 * 0.9 ** np.arange(1, 3)[None, None, :]
    s = np.zeros((1, 1, 2))
    z = np.zeros((1, 1, 2), dtype=int)
    out = carry_adaptation(a_trace, s, z, np.array([0.9]))
    assert out[0, 0] == pytest.approx(0.81)


def test_carry_adaptation_spike_at_last_step_matches_recurrence():
    # m = 0: carry = a_s + 1/p, so theta at the next block's first step
    # equals 1 + d (p a_s + 1), the sequential update
    p, a0, T_R = 0.9, 1.3, 4
    a_trace = a0 * p ** np.arange(1, T_R + 1)[None, None, :]
    s = np.zeros((1, 1, T_R))
    s[0, 0, -1] = 1.0
    z = np.zeros((1, 1, T_R), dtype=int)
    z[0, 0, -1] = 1
    carry = carry_adaptation(a_trace, s, z, np.array([p]))[0, 0]
    a_s = a0 * p**T_R
    assert carry == pytest.approx(a_s + 1.0 / p)
    assert p * carry == pytest.approx(adaptation_recurrence_oracle(a0, p, T_R, T_R))


def test_zero_adaptation_keeps_baseline_threshold():
    a_trace = np.zeros((1, 1, 5))
    theta = 1.0 + 1.8 * a_trace
    assert np.all(theta == 1.0)


@pytest.mark.parametrize("p", [0.1, 0.5, 0.9, 0.999])
def test_carry_adaptation_matches_eq_recurrence_all_positions(p):
    T_R = 16
    a0 = 0.7
    for pos in range(1, T_R + 1):
        a_trace = a0 * p ** np.arange(1, T_R + 1)[None, None, :]
        s = np.zeros((1, 1, T_R))
        s[0, 0, pos - 1] = 1.0
        stilde = np.zeros(T_R)
        stilde[pos - 1] = 1.0
        z = latent_spike_timing(stilde)[None, None, :]
        carry = carry_adaptation(a_trace, s, z, np.array([p]))[0, 0]
        want = adaptation_recurrence_oracle(a0, p, pos, T_R)
        assert p * carry == pytest.approx(want, rel=1e-12)


def test_carry_adaptation_rejects_p_zero_with_spike():
    a_trace = np.zeros((1, 1, 2))
    s = np.zeros((1, 1, 2))
    s[0, 0, 0] = 1.0
    z = np.array([[[1, 2]]])
    with pytest.raises(ValueError):
        carry_adaptation(a_trace, s, z, np.array([0.0]))


# ---------------------------------------------------------------------------
# run_block composition


def test_run_block_zero_input_decays_geometrically():
    lp = neuron_params(beta=0.5, d=0.0)
    state = init_block_state(1, 1, 4, v0=0.8)
    s, z, v_end, nxt = run_block(lp, np.zeros((1, 1, 4)), state)
    assert not s.any() and not z.any()
    assert v_end[0, 0] == pytest.approx(0.8 * 0.5**4)
    assert nxt.v0[0, 0] == pytest.approx(0.8 * 0.5**4)


def test_run_block_constant_bias_once_per_block():
    lp = neuron_params(beta=0.5, d=0.0, b=3.0, w=0.0)
    state = init_block_state(1, 1, 4)
    spikes = []
    for _ in range(6):
        s, _, _, state = run_block(lp, np.zeros((1, 1, 4)), state)
        spikes.append(s[0, 0])
    counts = [int(s.sum()) for s in spikes]
    assert counts == [1] * 6
    # fixed phase after the first block -> firing rate 1/(T_R * DT)
    phases = [int(np.argmax(s)) for s in spikes[1:]]
    assert len(set(phases)) == 1
