"""Block engine: refractory-length segments with no sequential inner loop.

A neuron with an absolute refractory period of ``T_R`` steps spikes at most
once in any window of ``T_R`` steps. Each such window ("block") can therefore
be computed without stepping through time: the no-reset membrane trace is a
convolution of the input current with the decay kernel, candidate spikes are
a pointwise comparison, and a double cumulative sum isolates the first
candidate. Only the carries between consecutive blocks are sequential, so a
length-T simulation needs ceil(T / T_R) sequential stages per layer instead
of T.

Cross-block bookkeeping:

* input current of the next block is masked where the previous block's
  latent timing shows the neuron still refractory, and the recurrent drive
  comes from the previous block's spikes at the same within-block offset
  (transmission delay equal to T_R);
* the initial membrane of the next block is the previous block's final
  no-reset value, or zero if the neuron spiked;
* the initial adaptation value is decayed through the block, with a closed
  form accounting for the single spike.

For ``arp_steps == 1`` the refractory mask is empty, but the standard
model's reset factor still nullifies current entering one step after a
spike, so that step is masked explicitly; without it the two engines
diverge on consecutive-spike drives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import BETA_MAX, BETA_MIN, LayerParams, NetConfig
from .standard import StandardRollout, _cast_params


@dataclass
class BlockState:
    """Carry between consecutive blocks of one layer."""

    v0: np.ndarray       # (B, N) initial membrane of the coming block
    a0: np.ndarray       # (B, N) initial adaptation value
    prev_s: np.ndarray   # (B, N, T_R) spikes of the previous block
    prev_z: np.ndarray   # (B, N, T_R) latent timings of the previous block


def init_block_state(n_neurons, batch, arp_steps, dtype=np.float64, v0=0.0, a0=0.0):
    shape = (batch, n_neurons)
    return BlockState(
        v0=np.broadcast_to(np.asarray(v0, dtype=dtype), shape).copy(),
        a0=np.broadcast_to(np.asarray(a0, dtype=dtype), shape).copy(),
        prev_s=np.zeros(shape + (arp_steps,), dtype=dtype),
        prev_z=np.zeros(shape + (arp_steps,), dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# elementary block operations


def decay_kernel(beta, length, dtype=np.float64):
    """Lower-triangular decay kernel K[i, t, j] = (1-beta_i) beta_i^(t-j).

    Rows cover t = 1..length, columns j = 0..length; column 0 receives the
    initial-condition slot of the augmented current.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=dtype))
    pows = beta[:, None] ** np.arange(length + 1)
    diff = np.arange(1, length + 1)[:, None] - np.arange(length + 1)[None, :]
    K = (1.0 - beta)[:, None, None] * pows[:, np.clip(diff, 0, length)]
    K *= diff >= 0
    return K.astype(dtype, copy=False)


def decay_kernel_dbeta(beta, length, dtype=np.float64):
    """d/d(beta) of :func:`decay_kernel`, used by the backward pass."""
    beta = np.atleast_1d(np.asarray(beta, dtype=dtype))
    pows = beta[:, None] ** np.arange(length + 1)
    diff = np.arange(1, length + 1)[:, None] - np.arange(length + 1)[None, :]
    k = np.clip(diff, 0, length)
    # d/db (1-b) b^k = -b^k + (1-b) k b^(k-1); the k=0 row is exactly -1
    km1 = np.clip(diff - 1, 0, length)
    term = np.where(k > 0, k * pows[:, km1], 0.0)
    dK = -pows[:, k] + (1.0 - beta)[:, None, None] * term
    dK *= diff >= 0
    return dK.astype(dtype, copy=False)


def no_reset_membrane(current, beta, v0=0.0):
    """Membrane trace without the spike reset, computed as a convolution.

    Equals the sequential recurrence v[t] = beta*v[t-1] + (1-beta)*I[t]
    started at v[0]=v0, with the initial condition injected as the slot-0
    value v0/(1-beta) of the augmented current. ``current`` has time on the
    last axis; ``beta`` and ``v0`` broadcast against its leading axes.
    """
    current = np.asarray(current)
    dtype = current.dtype if np.issubdtype(current.dtype, np.floating) else np.float64
    current = current.astype(dtype, copy=False)
    beta = np.asarray(beta, dtype=dtype)
    if np.any(beta < BETA_MIN) or np.any(beta > BETA_MAX):
        raise ValueError(f"beta outside clamp range [{BETA_MIN}, {BETA_MAX}]")
    T = current.shape[-1]
    lead = np.broadcast_shapes(current.shape[:-1], beta.shape, np.shape(v0))
    cur = np.broadcast_to(current, lead + (T,))
    b = np.broadcast_to(beta, lead)
    v0a = np.broadcast_to(np.asarray(v0, dtype=dtype), lead)
    J = np.concatenate([(v0a / (1.0 - b))[..., None], cur], axis=-1)
    pows = b[..., None] ** np.arange(T + 1)
    diff = np.arange(1, T + 1)[:, None] - np.arange(T + 1)[None, :]
    K = (1.0 - b)[..., None, None] * pows[..., np.clip(diff, 0, T)]
    K = K * (diff >= 0)
    return np.einsum("...tj,...j->...t", K, J)


def faulty_spikes(v_tilde, theta):
    """Candidate spikes: strict comparison of the no-reset trace."""
    v_tilde = np.asarray(v_tilde)
    theta = np.asarray(theta)
    return (v_tilde > theta).astype(np.uint8)


def latent_spike_timing(s_tilde):
    """Map a binary trace to integer timings via a double cumulative sum.

    z[t] = sum_{k<=t} s[k] * (t-k+1). The first 1 of the input maps to the
    only value 1; entries after it increase strictly.
    """
    s = (np.asarray(s_tilde) != 0).astype(np.int64)
    return s.cumsum(axis=-1).cumsum(axis=-1)


def first_spike_only(z):
    """Keep the unique latent value 1, dropping every later candidate."""
    return (np.asarray(z) == 1).astype(np.uint8)


def block_input_current(params: LayerParams, ff_spikes, state: BlockState):
    """Input current of the coming block, with the refractory mask applied.

    ``ff_spikes`` are the presynaptic spikes of the same block index from
    the previous layer, shape (B, n_in, T_R); recurrent drive comes from the
    previous block's spikes of this layer at identical offsets.
    """
    ff = np.asarray(ff_spikes)
    if ff.ndim != 3 or ff.shape[1] != params.n_in:
        raise ValueError(f"ff_spikes must be (B, {params.n_in}, T_R)")
    if state.prev_s.shape[-1] != ff.shape[-1]:
        raise ValueError("ff_spikes and state disagree on block length")
    spiked = state.prev_s.max(axis=-1, keepdims=True)
    mask = state.prev_z >= spiked
    if ff.shape[-1] == 1:
        # reset factor of the sequential model nullifies next-step current
        mask = mask & (spiked < 0.5)
    i_free = params.b[:, None] + _lin(params.w_ff, ff)
    if params.w_rec is not None:
        i_free = i_free + _lin(params.w_rec, state.prev_s)
    return np.where(mask, i_free, 0.0)


def _lin(w, x):
    # w (N, M) applied to x (B, M, T) -> (B, N, T)
    return np.tensordot(w, x, axes=([1], [1])).transpose(1, 0, 2)


def carry_membrane(v_end, s_block):
    """Initial membrane of the next block: final value, or zero after a spike."""
    spiked = np.asarray(s_block).max(axis=-1)
    return np.asarray(v_end) * (1.0 - spiked)


def carry_adaptation(a_trace, s_block, z_block, p):
    """Initial adaptation value of the next block.

    Without a spike this is the decayed end value p^T_R * a0 (the last entry
    of ``a_trace``). With a spike at offset k the closed form
    p^m (a_s + 1/p) applies, where m counts the post-spike steps (latent
    timing > 1) and a_s is the adaptation value at the spike step.
    """
    a_trace = np.asarray(a_trace)
    s = np.asarray(s_block)
    z = np.asarray(z_block)
    p = np.asarray(p)
    spiked = s.max(axis=-1) > 0
    if np.any(spiked & (np.broadcast_to(p, spiked.shape) == 0.0)):
        raise ValueError("p = 0 with an emitted spike makes the adaptation carry undefined")
    safe_p = np.where(p > 0, p, 1.0)
    a_s = (a_trace * s).sum(axis=-1)
    m = (z > 1).sum(axis=-1)
    spike_val = safe_p**m * (a_s + 1.0 / safe_p)
    return np.where(spiked, spike_val, a_trace[..., -1])


def run_block(params: LayerParams, ff_spikes, state: BlockState):
    """One block of one layer: current, convolution, candidate removal, carries.

    Returns (spikes, latent timings, end-of-block no-reset membranes, next
    state). No loop over time anywhere inside.
    """
    s, z, v_end, nxt, _ = _run_block_full(params, ff_spikes, state)
    return s, z, v_end, nxt


def _run_block_full(params, ff_spikes, state, kernel=None, p_pows=None):
    dtype = state.v0.dtype
    arp = state.prev_s.shape[-1]
    i = block_input_current(params, ff_spikes, state).astype(dtype, copy=False)
    if kernel is None:
        kernel = decay_kernel(params.beta, arp, dtype)
    if p_pows is None:
        p_pows = np.asarray(params.p, dtype=dtype)[:, None] ** np.arange(1, arp + 1)
    J = np.concatenate([(state.v0 / (1.0 - params.beta))[..., None], i], axis=-1)
    v_tilde = _conv(kernel, J)
    a_trace = state.a0[..., None] * p_pows
    theta = 1.0 + params.d[:, None] * a_trace
    s_tilde = v_tilde > theta
    z = latent_spike_timing(s_tilde)
    s = (z == 1).astype(dtype)
    v_end = v_tilde[..., -1]
    v0_next = carry_membrane(v_end, s)
    a0_next = carry_adaptation(a_trace, s, z, np.asarray(params.p, dtype=dtype))
    nxt = BlockState(v0=v0_next, a0=a0_next, prev_s=s, prev_z=z)
    extras = {"v_tilde": v_tilde, "i": i, "theta": theta, "a_trace": a_trace}
    return s, z, v_end, nxt, extras


def _conv(kernel, J):
    # kernel (N, T, T+1), J (B, N, T+1) -> (B, N, T)
    out = np.matmul(kernel, J.transpose(1, 2, 0))
    return out.transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# full-network rollout


@dataclass
class BlockLayerTape:
    """Forward record of one layer of the block rollout."""

    params: LayerParams
    ff: np.ndarray             # (B, n_in, T_pad) inputs consumed
    s: np.ndarray | None       # (B, N, T_pad) correct spikes
    z: np.ndarray | None       # (B, N, T_pad) latent timings
    v_tilde: np.ndarray        # (B, N, T_pad) no-reset traces
    i: np.ndarray | None       # (B, N, T_pad) masked input current
    mask: np.ndarray | None    # (B, N, T_pad) effective current mask
    v0s: np.ndarray            # (B, N, NB+1) per-block initial membranes
    a0s: np.ndarray | None     # (B, N, NB+1) per-block initial adaptation
    kernel: np.ndarray         # (N, T_R, T_R+1)
    p_pows: np.ndarray | None  # (N, T_R)
    is_readout: bool


@dataclass
class BlockRollout(StandardRollout):
    engine: str = "block"
    arp_steps: int = 1
    n_blocks: int = 0
    t_pad: int = 0


def rollout_block(
    layers: list[LayerParams],
    cfg: NetConfig,
    inputs: np.ndarray,
    arp_steps: int | None = None,
    record_tape: bool = False,
    record_membrane: bool = False,
    v_init=0.0,
    a_init=0.0,
) -> BlockRollout:
    """Run the network as ceil(T / arp_steps) chained blocks per layer.

    The input is zero-padded up to a multiple of the block length and all
    outputs are truncated back to T. Results match :func:`rollout_standard`
    bit-for-bit up to floating-point summation order.
    """
    inputs = np.asarray(inputs)
    if inputs.ndim != 3:
        raise ValueError("inputs must have shape (batch, n_in, T)")
    B, n_in, T = inputs.shape
    if T == 0:
        raise ValueError("T must be >= 1")
    if n_in != cfg.n_in:
        raise ValueError(f"inputs have {n_in} neurons, config expects {cfg.n_in}")
    arp = cfg.arp_steps if arp_steps is None else int(arp_steps)
    if arp < 1:
        raise ValueError("arp_steps must be >= 1")
    dtype = cfg.dtype
    params = _cast_params(layers, dtype)
    for k, lp in enumerate(params):
        if lp.w_rec is not None and np.any((lp.p == 0.0) & (lp.d != 0.0)):
            raise ValueError(f"layer {k}: p = 0 with nonzero adaptation scalar d is undefined")

    n_blocks = -(-T // arp)
    t_pad = n_blocks * arp
    ff = np.zeros((B, n_in, t_pad), dtype=dtype)
    ff[:, :, :T] = inputs

    layer_spikes = []
    membranes = [] if record_membrane else None
    tape = [] if record_tape else None
    seq_stages = []
    readout = None
    readout_trace = None

    for lp in params:
        kernel = decay_kernel(lp.beta, arp, dtype)
        inv_onemb = (1.0 / (1.0 - lp.beta)).astype(dtype, copy=False)
        # feedforward drive has no cross-block dependency: one big product
        drive = lp.b[:, None] + _lin(lp.w_ff, ff)

        if lp.is_readout:
            vt_all = np.empty((B, lp.n_out, t_pad), dtype=dtype)
            v0s = np.empty((B, lp.n_out, n_blocks + 1), dtype=dtype)
            v0 = np.zeros((B, lp.n_out), dtype=dtype)
            v0s[:, :, 0] = v0
            stages = 0
            for n in range(n_blocks):
                sl = slice(n * arp, (n + 1) * arp)
                J = np.concatenate([(v0 * inv_onemb)[..., None], drive[:, :, sl]], axis=-1)
                vt = _conv(kernel, J)
                vt_all[:, :, sl] = vt
                v0 = vt[..., -1]
                v0s[:, :, n + 1] = v0
                stages += 1
            seq_stages.append(stages)
            readout = vt_all[:, :, :T].sum(axis=-1)
            if record_membrane:
                readout_trace = vt_all[:, :, :T]
            if record_tape:
                tape.append(
                    BlockLayerTape(lp, ff, None, None, vt_all, None, None, v0s, None, kernel, None, True)
                )
        else:
            p_pows = lp.p[:, None] ** np.arange(1, arp + 1, dtype=dtype)
            safe_p = np.where(lp.p > 0, lp.p, 1.0)
            s_all = np.empty((B, lp.n_out, t_pad), dtype=dtype)
            vt_all = np.empty((B, lp.n_out, t_pad), dtype=dtype)
            z_all = np.empty((B, lp.n_out, t_pad), dtype=np.int32) if record_tape else None
            i_all = np.empty((B, lp.n_out, t_pad), dtype=dtype) if record_tape else None
            m_all = np.empty((B, lp.n_out, t_pad), dtype=np.uint8) if record_tape else None
            v0s = np.empty((B, lp.n_out, n_blocks + 1), dtype=dtype) if record_tape else None
            a0s = np.empty((B, lp.n_out, n_blocks + 1), dtype=dtype) if record_tape else None
            state = init_block_state(lp.n_out, B, arp, dtype, v_init, a_init)
            if record_tape:
                v0s[:, :, 0] = state.v0
                a0s[:, :, 0] = state.a0
            stages = 0
            for n in range(n_blocks):
                sl = slice(n * arp, (n + 1) * arp)
                spiked = state.prev_s.max(axis=-1, keepdims=True)
                mask = state.prev_z >= spiked
                if arp == 1:
                    mask = mask & (spiked < 0.5)
                i_free = drive[:, :, sl]
                if lp.w_rec is not None:
                    i_free = i_free + _lin(lp.w_rec, state.prev_s)
                i = np.where(mask, i_free, 0.0)

                J = np.concatenate([(state.v0 * inv_onemb)[..., None], i], axis=-1)
                v_tilde = _conv(kernel, J)
                a_trace = state.a0[..., None] * p_pows
                theta = 1.0 + lp.d[:, None] * a_trace
                z = (v_tilde > theta).astype(np.int64).cumsum(axis=-1).cumsum(axis=-1)
                s = (z == 1).astype(dtype)

                sp = s.max(axis=-1)
                v0 = v_tilde[..., -1] * (1.0 - sp)
                a_s = (a_trace * s).sum(axis=-1)
                m = (z > 1).sum(axis=-1)
                a0 = np.where(sp > 0, safe_p**m * (a_s + 1.0 / safe_p), a_trace[..., -1])

                s_all[:, :, sl] = s
                vt_all[:, :, sl] = v_tilde
                if record_tape:
                    z_all[:, :, sl] = z
                    i_all[:, :, sl] = i
                    m_all[:, :, sl] = mask
                    v0s[:, :, n + 1] = v0
                    a0s[:, :, n + 1] = a0
                state = BlockState(v0=v0, a0=a0, prev_s=s, prev_z=z)
                stages += 1
            seq_stages.append(stages)
            layer_spikes.append(s_all[:, :, :T])
            if record_membrane:
                # within a block the no-reset trace is valid up to and
                # including the spike step; afterwards the true membrane is 0
                s_resh = s_all.reshape(B, lp.n_out, n_blocks, arp)
                after = (s_resh.cumsum(axis=-1) - s_resh) > 0
                valid = ~after.reshape(B, lp.n_out, t_pad)[:, :, :T]
                membranes.append(vt_all[:, :, :T] * valid)
            if record_tape:
                tape.append(
                    BlockLayerTape(lp, ff, s_all, z_all, vt_all, i_all, m_all, v0s, a0s, kernel, p_pows, False)
                )
            ff = s_all

    return BlockRollout(
        layer_spikes=layer_spikes,
        readout=readout,
        seq_stages=seq_stages,
        cfg=cfg,
        inputs=inputs,
        membranes=membranes,
        readout_trace=readout_trace,
        tape=tape,
        engine="block",
        arp_steps=arp,
        n_blocks=n_blocks,
        t_pad=t_pad,
    )
