"""Reverse-mode gradients through both engines, losses, Adam, training loop.

The forward rollouts record a tape (per-layer membrane, adaptation, spikes,
gates or masks); :func:`backward` replays the chain rule over it in reverse.
The spike nonlinearity contributes a surrogate derivative evaluated at
(membrane - threshold). Under the default ``detached`` policy, gradients
flow only through feedforward connections and the smooth dynamics: reset
factors, refractory gates and masks, latent timings, recurrent spike inputs
and carry selectors are treated as constants (recurrent weights still
receive gradients; the spikes feeding them do not propagate further).
Under ``attached``, every path where spikes enter as products or sums also
propagates exact derivatives; only the bare spike comparison keeps the
surrogate. In the block graph the surrogate is applied exactly once per
emitted spike, at the candidate comparison of the block that produced it,
with the first-spike selection acting as a constant mask.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .blocks import decay_kernel_dbeta, rollout_block
from .params import BETA_MAX, BETA_MIN, P_MAX, P_MIN, LayerParams, NetConfig, clamp
from .standard import rollout_standard

SURROGATES = ("multi_gaussian", "fast_sigmoid", "boxcar")
DETACH_POLICIES = ("detached", "attached")


def _gauss(x, mu, sigma):
    return np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * np.sqrt(2.0 * np.pi))


def surrogate_derivative(v_minus_theta, kind="multi_gaussian"):
    """Smooth stand-in for the spike indicator's derivative at V - theta."""
    x = np.asarray(v_minus_theta)
    if kind == "multi_gaussian":
        return (
            1.15 * _gauss(x, 0.0, 0.5)
            - 0.15 * _gauss(x, 3.0, 3.0)
            - 0.15 * _gauss(x, -3.0, 3.0)
        )
    if kind == "fast_sigmoid":
        return (10.0 * np.abs(x) + 1.0) ** -2.0
    if kind == "boxcar":
        return np.where(np.abs(x) <= 0.5, 0.5, 0.0)
    raise ValueError(f"unknown surrogate {kind!r}")


@dataclass
class TrainConfig:
    surrogate: str = "multi_gaussian"
    detach_policy: str = "detached"
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_milestones: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.surrogate not in SURROGATES:
            raise ValueError(f"surrogate must be one of {SURROGATES}")
        if self.detach_policy not in DETACH_POLICIES:
            raise ValueError(f"detach_policy must be one of {DETACH_POLICIES}")


@dataclass
class LayerGrads:
    beta: np.ndarray
    p: np.ndarray
    d: np.ndarray
    b: np.ndarray
    w_ff: np.ndarray
    w_rec: np.ndarray | None = None

    @classmethod
    def zeros_like(cls, lp: LayerParams, dtype=np.float64):
        return cls(
            beta=np.zeros(lp.n_out, dtype=dtype),
            p=np.zeros(lp.n_out, dtype=dtype),
            d=np.zeros(lp.n_out, dtype=dtype),
            b=np.zeros(lp.n_out, dtype=dtype),
            w_ff=np.zeros_like(lp.w_ff, dtype=dtype),
            w_rec=None if lp.w_rec is None else np.zeros_like(lp.w_rec, dtype=dtype),
        )


# ---------------------------------------------------------------------------
# backward passes


def backward(rollout, d_readout=None, d_spikes=None, config: TrainConfig | None = None):
    """Accumulate parameter gradients for a recorded rollout.

    ``d_readout`` is dL/d(readout sums), shape (B, C); ``d_spikes`` is
    dL/d(spikes of the last spiking layer), shape (B, N, T). Either or both.
    """
    if rollout.tape is None:
        raise RuntimeError("rollout was not recorded with record_tape=True")
    if config is None:
        config = TrainConfig()
    if d_readout is None and d_spikes is None:
        raise ValueError("need d_readout and/or d_spikes")
    if d_readout is not None and not rollout.tape[-1].is_readout:
        raise ValueError("rollout has no readout layer")
    if rollout.engine == "standard":
        return _backward_standard(rollout, d_readout, d_spikes, config)
    return _backward_block(rollout, d_readout, d_spikes, config)


def _backward_standard(rollout, d_readout, d_spikes, config):
    tape = rollout.tape
    attached = config.detach_policy == "attached"
    grads = [None] * len(tape)
    sbar = None  # gradient w.r.t. the inputs of the layer just processed

    for l in range(len(tape) - 1, -1, -1):
        lt = tape[l]
        lp = lt.params
        dtype = lt.v.dtype
        B, N, T = lt.ff.shape[0], lp.n_out, lt.ff.shape[2]
        g = LayerGrads.zeros_like(lp, dtype)
        beta, p, d, b = lp.beta, lp.p, lp.d, lp.b

        if lt.is_readout:
            obar = np.zeros((B, N), dtype=dtype) if d_readout is None else d_readout.astype(dtype)
            i_all = b[:, None] + np.tensordot(lp.w_ff, lt.ff, axes=([1], [1])).transpose(1, 0, 2)
            ibar_all = np.empty((B, N, T), dtype=dtype)
            vbar = np.zeros((B, N), dtype=dtype)
            for t in range(T, 0, -1):
                vb = vbar + obar
                g.beta += (vb * (lt.v[:, :, t - 1] - i_all[:, :, t - 1])).sum(axis=0)
                ibar_all[:, :, t - 1] = vb * (1.0 - beta)
                vbar = vb * beta
            g.b = ibar_all.sum(axis=(0, 2))
            g.w_ff = np.einsum("bnt,bjt->nj", ibar_all, lt.ff)
            sbar = np.einsum("bnt,nj->bjt", ibar_all, lp.w_ff) if l > 0 else None
            grads[l] = g
            continue

        # spiking layer
        sb_in = np.zeros((B, N, T), dtype=dtype) if sbar is None else sbar
        if d_spikes is not None and _is_last_spiking(tape, l):
            sb_in = sb_in + d_spikes.astype(dtype)
        sbar_l = sb_in.copy() if attached else sb_in

        rec_full = np.zeros((B, N, T), dtype=dtype)
        arp = rollout.cfg.arp_steps
        if T > arp:
            rec_full[:, :, arp:] = lt.s[:, :, :-arp]
        i_free = b[:, None] + np.tensordot(lp.w_ff, lt.ff, axes=([1], [1])).transpose(1, 0, 2)
        i_free += np.tensordot(lp.w_rec, rec_full, axes=([1], [1])).transpose(1, 0, 2)
        i_all = i_free * lt.gate

        theta = 1.0 + d[None, :, None] * lt.a[:, :, 1:]
        sig = surrogate_derivative(lt.v[:, :, 1:] - theta, config.surrogate).astype(dtype)
        s_prev = np.zeros((B, N, T), dtype=dtype)
        s_prev[:, :, 1:] = lt.s[:, :, :-1]
        r_full = 1.0 - s_prev
        if attached:
            u_full = beta[None, :, None] * lt.v[:, :, :-1] + (1.0 - beta)[None, :, None] * i_all

        itildebar = np.empty((B, N, T), dtype=dtype)
        vbar = np.zeros((B, N), dtype=dtype)
        abar = np.zeros((B, N), dtype=dtype)
        for t in range(T, 0, -1):
            k = t - 1
            sb = sbar_l[:, :, k]
            grad_spike = sb * sig[:, :, k]
            vb = vbar + grad_spike
            thb = -grad_spike
            g.d += (thb * lt.a[:, :, t]).sum(axis=0)
            ab = abar + thb * d
            g.p += (ab * lt.a[:, :, t - 1]).sum(axis=0)
            if attached and k >= 1:
                sbar_l[:, :, k - 1] += ab
            abar = ab * p
            vb2 = vb * r_full[:, :, k]
            if attached and k >= 1:
                sbar_l[:, :, k - 1] -= vb * u_full[:, :, k]
            g.beta += (vb2 * (lt.v[:, :, t - 1] - i_all[:, :, k])).sum(axis=0)
            itb = vb2 * (1.0 - beta) * lt.gate[:, :, k]
            itildebar[:, :, k] = itb
            if attached and k >= arp:
                sbar_l[:, :, k - arp] += itb @ lp.w_rec
            vbar = vb2 * beta

        g.b = itildebar.sum(axis=(0, 2))
        g.w_ff = np.einsum("bnt,bjt->nj", itildebar, lt.ff)
        g.w_rec = np.einsum("bnt,bjt->nj", itildebar, rec_full)
        sbar = np.einsum("bnt,nj->bjt", itildebar, lp.w_ff) if l > 0 else None
        grads[l] = g

    return grads


def _backward_block(rollout, d_readout, d_spikes, config):
    tape = rollout.tape
    attached = config.detach_policy == "attached"
    arp, nb, t_pad = rollout.arp_steps, rollout.n_blocks, rollout.t_pad
    T = rollout.inputs.shape[-1]
    grads = [None] * len(tape)
    sbar = None

    for l in range(len(tape) - 1, -1, -1):
        lt = tape[l]
        lp = lt.params
        dtype = lt.v_tilde.dtype
        B, N = lt.v_tilde.shape[:2]
        g = LayerGrads.zeros_like(lp, dtype)
        beta, p, d, b = lp.beta, lp.p, lp.d, lp.b
        K = lt.kernel
        Kt = K.transpose(0, 2, 1)
        dK = decay_kernel_dbeta(beta, arp, dtype)
        inv1mb = 1.0 / (1.0 - beta)

        if lt.is_readout:
            obar = np.zeros((B, N), dtype=dtype) if d_readout is None else d_readout.astype(dtype)
            drive = b[:, None] + np.tensordot(lp.w_ff, lt.ff, axes=([1], [1])).transpose(1, 0, 2)
            vtbar_base = np.zeros((B, N, t_pad), dtype=dtype)
            vtbar_base[:, :, :T] = obar[:, :, None]
            ibar_all = np.empty((B, N, t_pad), dtype=dtype)
            v0bar = np.zeros((B, N), dtype=dtype)
            for n in range(nb - 1, -1, -1):
                sl = slice(n * arp, (n + 1) * arp)
                vtbar = vtbar_base[:, :, sl].copy()
                vtbar[:, :, -1] += v0bar
                J = np.concatenate(
                    [(lt.v0s[:, :, n] * inv1mb)[..., None], drive[:, :, sl]], axis=-1
                )
                Jbar = _conv_t(Kt, vtbar)
                g.beta += _beta_conv_grad(dK, J, vtbar)
                g.beta += (Jbar[:, :, 0] * lt.v0s[:, :, n] * inv1mb**2).sum(axis=0)
                ibar_all[:, :, sl] = Jbar[:, :, 1:]
                v0bar = Jbar[:, :, 0] * inv1mb
            g.b = ibar_all.sum(axis=(0, 2))
            g.w_ff = np.einsum("bnt,bjt->nj", ibar_all, lt.ff)
            sbar = np.einsum("bnt,nj->bjt", ibar_all, lp.w_ff) if l > 0 else None
            grads[l] = g
            continue

        sb_in = np.zeros((B, N, t_pad), dtype=dtype) if sbar is None else sbar
        if d_spikes is not None and _is_last_spiking(tape, l):
            sb_in = sb_in.copy()
            sb_in[:, :, :T] += d_spikes.astype(dtype)
        sbar_l = sb_in.copy() if attached else sb_in

        p_pows = lt.p_pows
        steps = np.arange(1, arp + 1)
        dp_pows = steps * np.where(p[:, None] > 0, p[:, None], 1.0) ** (steps - 1)
        dp_pows[:, 0] = 1.0  # k=1 term: d(p^1)/dp = 1 even at p = 0
        safe_p = np.where(p > 0, p, 1.0)
        p_last = p_pows[:, -1]

        itildebar = np.empty((B, N, t_pad), dtype=dtype)
        v0bar = np.zeros((B, N), dtype=dtype)
        a0bar_next = np.zeros((B, N), dtype=dtype)
        recbar_pending = None  # attached: grads into the previous block's spikes

        for n in range(nb - 1, -1, -1):
            sl = slice(n * arp, (n + 1) * arp)
            s_n = lt.s[:, :, sl]
            z_n = lt.z[:, :, sl]
            i_n = lt.i[:, :, sl]
            mask_n = lt.mask[:, :, sl]
            a0_n = lt.a0s[:, :, n]
            spiked = s_n.max(axis=-1)
            a_trace = a0_n[..., None] * p_pows

            if attached and recbar_pending is not None:
                sbar_l[:, :, sl] += recbar_pending
            # ---- carry backward (selectors constant under both policies;
            #      attached also routes the exact product terms into spikes)
            m = (z_n > 1).sum(axis=-1)
            pm = safe_p**m
            a_s = (a_trace * s_n).sum(axis=-1)
            spike_branch = pm * (a_s + 1.0 / safe_p)
            no_branch = a_trace[..., -1]
            # m + spike offset = block length, so the spiked carry equals
            # p^T_R a0 + p^(m-1): d/d(a0) = p^T_R in both branches,
            # d/dp = T_R p^(T_R-1) a0 + spiked (m-1) p^(m-2)
            dpdp_spike = (m - 1) * safe_p ** (m - 2.0)
            g.p += (
                a0bar_next * (arp * safe_p ** (arp - 1.0) * a0_n + spiked * dpdp_spike)
            ).sum(axis=0)
            if attached:
                sbar_l[:, :, sl] += (
                    a0bar_next * spiked * pm
                )[..., None] * a_trace
                sbar_l[:, :, sl] += (
                    a0bar_next * (spike_branch - no_branch)
                )[..., None] * s_n
                sbar_l[:, :, sl] += (-v0bar * lt.v_tilde[:, :, sl][..., -1])[..., None] * s_n
            a0bar = a0bar_next * p_last

            vtbar = np.zeros((B, N, arp), dtype=dtype)
            vtbar[:, :, -1] += v0bar * (1.0 - spiked)

            # ---- spike path: surrogate once per emitted spike
            theta = 1.0 + d[None, :, None] * a_trace
            sig = surrogate_derivative(lt.v_tilde[:, :, sl] - theta, config.surrogate).astype(dtype)
            stb = sbar_l[:, :, sl] * s_n * sig
            vtbar += stb
            # theta = 1 + d * a_trace
            g.d += (-stb * a_trace).sum(axis=(0, 2))
            a0bar += (-stb * d[None, :, None] * p_pows).sum(axis=-1)
            g.p += (-stb * d[None, :, None] * a0_n[..., None] * dp_pows).sum(axis=(0, 2))

            # ---- convolution backward
            J = np.concatenate([(lt.v0s[:, :, n] * inv1mb)[..., None], i_n], axis=-1)
            Jbar = _conv_t(Kt, vtbar)
            g.beta += _beta_conv_grad(dK, J, vtbar)
            g.beta += (Jbar[:, :, 0] * lt.v0s[:, :, n] * inv1mb**2).sum(axis=0)
            itb = Jbar[:, :, 1:] * mask_n
            itildebar[:, :, sl] = itb
            if attached:
                recbar_pending = np.tensordot(lp.w_rec.T, itb, axes=([1], [1])).transpose(1, 0, 2) \
                    if n > 0 else None
            v0bar = Jbar[:, :, 0] * inv1mb
            a0bar_next = a0bar

        g.b = itildebar.sum(axis=(0, 2))
        g.w_ff = np.einsum("bnt,bjt->nj", itildebar, lt.ff)
        prev_s_full = np.zeros((B, N, t_pad), dtype=dtype)
        if t_pad > arp:
            prev_s_full[:, :, arp:] = lt.s[:, :, :-arp]
        g.w_rec = np.einsum("bnt,bjt->nj", itildebar, prev_s_full)
        sbar = np.einsum("bnt,nj->bjt", itildebar, lp.w_ff) if l > 0 else None
        grads[l] = g

    return grads


def _conv_t(Kt, vtbar):
    # Kt (N, T+1, T), vtbar (B, N, T) -> (B, N, T+1)
    out = np.matmul(Kt, vtbar.transpose(1, 2, 0))
    return out.transpose(2, 0, 1)


def _beta_conv_grad(dK, J, vtbar):
    # sum_{b,t,j} vtbar[b,n,t] dK[n,t,j] J[b,n,j]
    tmp = np.matmul(dK, J.transpose(1, 2, 0))  # (N, T, B)
    return np.einsum("ntb,bnt->n", tmp, vtbar)


def _is_last_spiking(tape, l):
    return all(t.is_readout for t in tape[l + 1 :])


# ---------------------------------------------------------------------------
# losses


def cross_entropy_readout(readout, labels):
    """Mean softmax cross-entropy over the batch."""
    loss, _ = cross_entropy_with_grad(readout, labels)
    return loss


def cross_entropy_with_grad(readout, labels):
    o = np.asarray(readout, dtype=np.float64)
    labels = np.asarray(labels)
    B, C = o.shape
    if C < 2:
        raise ValueError("need at least two classes")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError("label out of range")
    shifted = o - o.max(axis=1, keepdims=True)
    expo = np.exp(shifted)
    probs = expo / expo.sum(axis=1, keepdims=True)
    nll = -np.log(probs[np.arange(B), labels])
    grad = probs.copy()
    grad[np.arange(B), labels] -= 1.0
    return float(nll.mean()), grad / B


def spike_count_loss(spikes):
    """Mean number of final-layer spikes; gradient is uniform."""
    s = np.asarray(spikes)
    B = s.shape[0]
    return float(s.sum() / B), np.full(s.shape, 1.0 / B)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard Adam with bias correction; parameters are clamped after
    every step so the decay factors stay in their valid ranges.

    The default clamp ceilings follow the published ranges, which assume
    millisecond-scale steps. Sub-millisecond simulations need decay factors
    above 0.99 for ordinary time constants (beta = exp(-0.1/20) = 0.995 at
    0.1 ms), so callers may widen the ceilings via ``beta_max`` / ``p_max``;
    floors are never relaxed.
    """

    def __init__(self, layers, config: TrainConfig, beta_max=None, p_max=None):
        self.config = config
        self.t = 0
        self.beta_max = beta_max
        self.p_max = p_max
        self.m = [LayerGrads.zeros_like(lp) for lp in layers]
        self.v = [LayerGrads.zeros_like(lp) for lp in layers]

    def step(self, layers, grads, lr=None):
        lr = self.config.lr if lr is None else lr
        b1, b2, eps = self.config.adam_beta1, self.config.adam_beta2, self.config.adam_eps
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for lp, g, m, v in zip(layers, grads, self.m, self.v):
            for name in lp.fields():
                gval = np.asarray(getattr(g, name), dtype=np.float64)
                mval = getattr(m, name)
                vval = getattr(v, name)
                mval *= b1
                mval += (1.0 - b1) * gval
                vval *= b2
                vval += (1.0 - b2) * gval**2
                update = lr * (mval / c1) / (np.sqrt(vval / c2) + eps)
                getattr(lp, name)[...] -= update
            if self.beta_max is None and self.p_max is None:
                clamp(lp)
            else:
                np.clip(lp.beta, BETA_MIN, self.beta_max or BETA_MAX, out=lp.beta)
                np.clip(lp.p, P_MIN, self.p_max or P_MAX, out=lp.p)
        return layers


def adam_step(layers, grads, optimizer: Adam, lr=None):
    """One optimizer step followed by clamping (see :class:`Adam`)."""
    return optimizer.step(layers, grads, lr=lr)


def lr_at_epoch(base_lr, milestones, epoch):
    """Learning rate after dividing by 10 at each passed milestone."""
    passed = sum(1 for ms in milestones if epoch >= ms)
    return base_lr / (10.0**passed)


# ---------------------------------------------------------------------------
# classifier training


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    wall_s: float
    lr: float
    eval_accuracy: float | None = None


@dataclass
class TrainLog:
    epochs: list
    best_params: list
    best_epoch: int
    best_loss: float
    engine: str


def _stack_dataset(dataset):
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    xs, ys = [], []
    for tensor, label in dataset:
        t = np.asarray(tensor)
        if t.ndim == 3:
            if t.shape[0] != 1:
                raise ValueError("per-sample tensors must have batch size 1")
            t = t[0]
        xs.append(t)
        ys.append(int(label))
    return np.stack(xs), np.asarray(ys)


def evaluate_classifier(layers, cfg, dataset, engine="standard", batch_size=64):
    X, y = _stack_dataset(dataset)
    run = rollout_block if engine == "block" else rollout_standard
    correct = 0
    for k in range(0, len(y), batch_size):
        out = run(layers, cfg, X[k : k + batch_size].astype(cfg.dtype))
        correct += int((out.readout.argmax(axis=1) == y[k : k + batch_size]).sum())
    return correct / len(y)


def train_classifier(
    layers,
    cfg: NetConfig,
    dataset,
    config: TrainConfig,
    eval_set=None,
    engine="standard",
):
    """Mini-batch Adam training of readout cross-entropy.

    Checkpoints parameters whenever the epoch training loss improves, decays
    the learning rate by 10 at each milestone epoch, and returns the log with
    the best parameters.
    """
    X, y = _stack_dataset(dataset)
    if cfg.n_classes < 2:
        raise ValueError("classification needs a readout with >= 2 classes")
    run = rollout_block if engine == "block" else rollout_standard
    rng = np.random.default_rng(config.seed)
    opt = Adam(layers, config)
    best_loss = np.inf
    best_params = [lp.copy() for lp in layers]
    best_epoch = -1
    epochs = []

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(config.lr, config.lr_milestones, epoch)
        order = rng.permutation(len(y))
        losses, correct = [], 0
        for k in range(0, len(y), config.batch_size):
            idx = order[k : k + config.batch_size]
            xb = X[idx].astype(cfg.dtype)
            out = run(layers, cfg, xb, record_tape=True)
            loss, d_readout = cross_entropy_with_grad(out.readout, y[idx])
            grads = backward(out, d_readout=d_readout, config=config)
            opt.step(layers, grads, lr=lr)
            losses.append(loss)
            correct += int((out.readout.argmax(axis=1) == y[idx]).sum())
        epoch_loss = float(np.mean(losses))
        stats = EpochStats(
            epoch=epoch,
            loss=epoch_loss,
            accuracy=correct / len(y),
            wall_s=time.perf_counter() - t0,
            lr=lr,
            eval_accuracy=(
                evaluate_classifier(layers, cfg, eval_set, engine, config.batch_size)
                if eval_set is not None
                else None
            ),
        )
        epochs.append(stats)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_params = [lp.copy() for lp in layers]
            best_epoch = epoch
    return TrainLog(
        epochs=epochs,
        best_params=best_params,
        best_epoch=best_epoch,
        best_loss=best_loss,
        engine=engine,
    )
