"""Sequential reference engine for adaptive LIF networks.

One time step at a time, exactly following the discretised dynamics:
membrane decays by ``beta`` and charges with ``(1-beta) * I``, the whole
update is multiplied by ``(1 - S[t-1])`` so a spike resets the membrane to
zero on the following step, input current is gated off while the neuron is
within its absolute refractory period, and the firing threshold is
``1 + d * a`` with ``a`` decaying by ``p`` and incremented one step after
each spike. Spiking is the strict comparison ``v > theta``. Recurrent input
is delayed by exactly ``arp_steps``.

This engine is the ground truth for the block engine; clarity beats speed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import LayerParams, NetConfig


@dataclass
class StandardLayerState:
    """Mutable per-layer state carried across steps.

    ``c`` counts steps since the last spike, measured at the current step
    (incremented on step entry, zeroed at the end of a spiking step), so the
    refractory gate is simply ``c >= arp_steps``. ``rec_buffer`` is a ring
    buffer of the last ``arp_steps`` spike vectors.
    """

    v: np.ndarray
    a: np.ndarray
    c: np.ndarray
    rec_buffer: np.ndarray
    s_prev: np.ndarray
    # last-step scratch, used by tape recording
    i: np.ndarray | None = None
    gate: np.ndarray | None = None

    @property
    def arp_steps(self) -> int:
        return self.rec_buffer.shape[0]


def init_layer_state(n_neurons, batch, arp_steps, dtype=np.float64, v0=0.0, a0=0.0):
    """Fresh state: fully recovered counter, empty spike history."""
    shape = (batch, n_neurons)
    return StandardLayerState(
        v=np.full(shape, v0, dtype=dtype) if np.isscalar(v0) else np.broadcast_to(v0, shape).astype(dtype).copy(),
        a=np.full(shape, a0, dtype=dtype) if np.isscalar(a0) else np.broadcast_to(a0, shape).astype(dtype).copy(),
        c=np.full(shape, arp_steps, dtype=np.int64),
        rec_buffer=np.zeros((arp_steps,) + shape, dtype=dtype),
        s_prev=np.zeros(shape, dtype=dtype),
    )


def step_layer(state: StandardLayerState, params: LayerParams, ff_in: np.ndarray, t: int):
    """Advance one hidden layer by one step. ``t`` is 1-based.

    ``ff_in`` holds the presynaptic spikes (or analog drive) for this step,
    shape (batch, n_in). Returns the mutated state and the spike vector.
    """
    if ff_in.shape[1] != params.n_in:
        raise ValueError(f"ff_in has {ff_in.shape[1]} inputs, layer expects {params.n_in}")
    arp = state.arp_steps
    slot = (t - 1) % arp
    beta, p, d, b = params.beta, params.p, params.d, params.b

    state.c += 1
    gate = state.c >= arp
    rec_in = state.rec_buffer[slot]
    # summation order fixed as bias + feedforward + recurrent (block engine matches)
    i_free = b + ff_in @ params.w_ff.T
    if params.w_rec is not None:
        i_free = i_free + rec_in @ params.w_rec.T
    i = np.where(gate, i_free, 0.0)

    v = (beta * state.v + (1.0 - beta) * i) * (1.0 - state.s_prev)
    a = p * state.a + state.s_prev
    theta = 1.0 + d * a
    s = (v > theta).astype(v.dtype)

    state.rec_buffer[slot] = s
    state.c[s > 0] = 0
    state.v, state.a, state.s_prev = v, a, s
    state.i, state.gate = i, gate
    return state, s


@dataclass
class StandardLayerTape:
    """Forward record of one layer, enough to replay the chain rule.

    ``v`` and ``a`` include the initial values at index 0 along time.
    Gated currents are recomputed in the backward pass from spikes and the
    stored gate, so they are not stored.
    """

    params: LayerParams
    ff: np.ndarray          # (B, n_in, T) inputs this layer consumed
    s: np.ndarray           # (B, N, T)
    v: np.ndarray           # (B, N, T+1)
    a: np.ndarray | None    # (B, N, T+1), None for readout
    gate: np.ndarray | None  # (B, N, T) uint8, None for readout
    is_readout: bool


@dataclass
class StandardRollout:
    layer_spikes: list
    readout: np.ndarray | None
    seq_stages: list
    cfg: NetConfig
    inputs: np.ndarray
    membranes: list | None = None
    readout_trace: np.ndarray | None = None
    tape: list | None = None
    engine: str = "standard"


def _cast_params(layers, dtype):
    out = []
    for lp in layers:
        out.append(
            LayerParams(
                beta=lp.beta.astype(dtype, copy=False),
                p=lp.p.astype(dtype, copy=False),
                d=lp.d.astype(dtype, copy=False),
                b=lp.b.astype(dtype, copy=False),
                w_ff=lp.w_ff.astype(dtype, copy=False),
                w_rec=None if lp.w_rec is None else lp.w_rec.astype(dtype, copy=False),
            )
        )
    return out


def rollout_standard(
    layers: list[LayerParams],
    cfg: NetConfig,
    inputs: np.ndarray,
    record_tape: bool = False,
    record_membrane: bool = False,
    v_init=0.0,
    a_init=0.0,
) -> StandardRollout:
    """Run the full network for T sequential steps per layer.

    ``inputs`` has shape (B, n_in, T); binary spikes for networks, but analog
    drive is accepted (single-neuron current fits use it). The readout output
    is the summed membrane potential over time, one row per batch element.
    """
    inputs = np.asarray(inputs)
    if inputs.ndim != 3:
        raise ValueError("inputs must have shape (batch, n_in, T)")
    B, n_in, T = inputs.shape
    if T == 0:
        raise ValueError("T must be >= 1")
    if n_in != cfg.n_in:
        raise ValueError(f"inputs have {n_in} neurons, config expects {cfg.n_in}")
    dtype = cfg.dtype
    params = _cast_params(layers, dtype)
    ff = inputs.astype(dtype, copy=False)

    layer_spikes = []
    membranes = [] if record_membrane else None
    tape = [] if record_tape else None
    seq_stages = []
    readout = None
    readout_trace = None

    for lp in params:
        if lp.is_readout:
            o = np.zeros((B, lp.n_out), dtype=dtype)
            v = np.zeros((B, lp.n_out), dtype=dtype)
            trace = np.empty((B, lp.n_out, T + 1), dtype=dtype) if (record_tape or record_membrane) else None
            if trace is not None:
                trace[:, :, 0] = v
            stages = 0
            for t in range(1, T + 1):
                i = lp.b + ff[:, :, t - 1] @ lp.w_ff.T
                v = lp.beta * v + (1.0 - lp.beta) * i
                o += v
                if trace is not None:
                    trace[:, :, t] = v
                stages += 1
            seq_stages.append(stages)
            readout = o
            if record_membrane:
                readout_trace = trace
            if record_tape:
                tape.append(StandardLayerTape(lp, ff, None, trace, None, None, True))
        else:
            state = init_layer_state(lp.n_out, B, cfg.arp_steps, dtype, v_init, a_init)
            s_out = np.empty((B, lp.n_out, T), dtype=dtype)
            if record_tape or record_membrane:
                v_hist = np.empty((B, lp.n_out, T + 1), dtype=dtype)
                v_hist[:, :, 0] = state.v
            else:
                v_hist = None
            if record_tape:
                a_hist = np.empty((B, lp.n_out, T + 1), dtype=dtype)
                a_hist[:, :, 0] = state.a
                gate_hist = np.empty((B, lp.n_out, T), dtype=np.uint8)
            else:
                a_hist = gate_hist = None
            stages = 0
            for t in range(1, T + 1):
                state, s = step_layer(state, lp, ff[:, :, t - 1], t)
                s_out[:, :, t - 1] = s
                if v_hist is not None:
                    v_hist[:, :, t] = state.v
                if record_tape:
                    a_hist[:, :, t] = state.a
                    gate_hist[:, :, t - 1] = state.gate
                stages += 1
            seq_stages.append(stages)
            layer_spikes.append(s_out)
            if record_membrane:
                membranes.append(v_hist[:, :, 1:])
            if record_tape:
                tape.append(StandardLayerTape(lp, ff, s_out, v_hist, a_hist, gate_hist, False))
            ff = s_out

    return StandardRollout(
        layer_spikes=layer_spikes,
        readout=readout,
        seq_stages=seq_stages,
        cfg=cfg,
        inputs=inputs,
        membranes=membranes,
        readout_trace=readout_trace,
        tape=tape,
    )


