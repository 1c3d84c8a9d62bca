"""Learnable layer parameters: initialization, clamping, JSON persistence.

Hidden layers carry per-neuron membrane decay ``beta``, adaptation decay
``p``, adaptation scalar ``d``, bias ``b``, a feedforward matrix ``w_ff``
and a recurrent matrix ``w_rec``. Readout (integrator) layers have no
spike mechanism and therefore no recurrence and no adaptation; they keep
``beta``, ``b`` and ``w_ff`` only.

All randomness goes through ``numpy.random.default_rng`` (PCG64), which is
part of the public contract: a fixed seed reproduces initializations
bit-for-bit across runs and platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

BETA_MIN, BETA_MAX = 0.01, 0.99
P_MIN, P_MAX = 0.0, 0.999

MEMBRANE_TAU_MS = 20.0
ADAPT_TAU_MS = 150.0
ADAPT_SCALE = 1.8

PARAMS_FORMAT_VERSION = 1


@dataclass
class NetConfig:
    """Architecture plus simulation controls.

    ``layer_widths`` lists hidden-layer sizes in feedforward order;
    ``n_classes`` is the readout width (0 means no readout layer).
    ``arp_steps`` is the absolute refractory period in time steps, which
    also fixes the recurrent transmission delay.
    """

    n_in: int
    layer_widths: list[int] = field(default_factory=list)
    n_classes: int = 0
    dt_ms: float = 1.0
    arp_steps: int = 1
    precision: int = 32

    def __post_init__(self):
        if self.n_in < 1:
            raise ValueError("n_in must be >= 1")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError("layer widths must be >= 1")
        if self.n_classes < 0:
            raise ValueError("n_classes must be >= 0")
        if self.dt_ms <= 0:
            raise ValueError("dt_ms must be > 0")
        if self.arp_steps < 1:
            raise ValueError("arp_steps must be >= 1")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    @property
    def widths(self) -> list[int]:
        """All layer widths including the readout, in simulation order."""
        ws = list(self.layer_widths)
        if self.n_classes:
            ws.append(self.n_classes)
        return ws

    def fan_ins(self) -> list[int]:
        ins = [self.n_in] + list(self.layer_widths)
        return ins[: len(self.widths)]


@dataclass
class LayerParams:
    """Per-layer learnable quantities. ``w_rec`` is None for readouts."""

    beta: np.ndarray
    p: np.ndarray
    d: np.ndarray
    b: np.ndarray
    w_ff: np.ndarray
    w_rec: np.ndarray | None = None

    @property
    def n_out(self) -> int:
        return self.w_ff.shape[0]

    @property
    def n_in(self) -> int:
        return self.w_ff.shape[1]

    @property
    def is_readout(self) -> bool:
        return self.w_rec is None

    def fields(self):
        names = ["beta", "p", "d", "b", "w_ff"]
        if self.w_rec is not None:
            names.append("w_rec")
        return names

    def copy(self) -> "LayerParams":
        return LayerParams(
            beta=self.beta.copy(),
            p=self.p.copy(),
            d=self.d.copy(),
            b=self.b.copy(),
            w_ff=self.w_ff.copy(),
            w_rec=None if self.w_rec is None else self.w_rec.copy(),
        )


def init_layer(n_in, n_out, dt_ms, is_readout=False, seed=0) -> LayerParams:
    """Initialize one layer.

    Weights are uniform in [-sqrt(1/fan_in), +sqrt(1/fan_in)], biases zero.
    Membrane decay corresponds to a 20 ms time constant; hidden layers get a
    150 ms adaptation time constant and adaptation scalar 1.8. Readout layers
    carry no recurrence and no adaptation.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("n_in and n_out must be >= 1")
    if dt_ms <= 0:
        raise ValueError("dt_ms must be > 0")
    rng = np.random.default_rng(seed)
    bound = np.sqrt(1.0 / n_in)
    w_ff = rng.uniform(-bound, bound, size=(n_out, n_in))
    beta = np.full(n_out, np.exp(-dt_ms / MEMBRANE_TAU_MS))
    if is_readout:
        return LayerParams(
            beta=beta,
            p=np.zeros(n_out),
            d=np.zeros(n_out),
            b=np.zeros(n_out),
            w_ff=w_ff,
            w_rec=None,
        )
    rec_bound = np.sqrt(1.0 / n_out)
    w_rec = rng.uniform(-rec_bound, rec_bound, size=(n_out, n_out))
    return LayerParams(
        beta=beta,
        p=np.full(n_out, np.exp(-dt_ms / ADAPT_TAU_MS)),
        d=np.full(n_out, ADAPT_SCALE),
        b=np.zeros(n_out),
        w_ff=w_ff,
        w_rec=w_rec,
    )


def init_net(cfg: NetConfig, seed=0) -> list[LayerParams]:
    """Initialize all layers of a network from one master seed."""
    widths = cfg.widths
    if not widths:
        raise ValueError("network needs at least one layer")
    layer_seeds = np.random.SeedSequence(seed).generate_state(len(widths))
    layers = []
    n_prev = cfg.n_in
    for k, width in enumerate(widths):
        is_readout = bool(cfg.n_classes) and k == len(widths) - 1
        layers.append(
            init_layer(n_prev, width, cfg.dt_ms, is_readout=is_readout, seed=int(layer_seeds[k]))
        )
        n_prev = width
    return layers


def clamp(params: LayerParams) -> LayerParams:
    """Clip decay factors into their valid ranges, in place. Idempotent."""
    np.clip(params.beta, BETA_MIN, BETA_MAX, out=params.beta)
    np.clip(params.p, P_MIN, P_MAX, out=params.p)
    return params


def _layer_to_json(lp: LayerParams) -> dict:
    return {
        "beta": lp.beta.tolist(),
        "p": lp.p.tolist(),
        "d": lp.d.tolist(),
        "b": lp.b.tolist(),
        "w_ff": lp.w_ff.tolist(),
        "w_rec": None if lp.w_rec is None else lp.w_rec.tolist(),
    }


def _layer_from_json(obj: dict) -> LayerParams:
    arr = lambda x: np.asarray(x, dtype=np.float64)
    return LayerParams(
        beta=arr(obj["beta"]),
        p=arr(obj["p"]),
        d=arr(obj["d"]),
        b=arr(obj["b"]),
        w_ff=arr(obj["w_ff"]),
        w_rec=None if obj["w_rec"] is None else arr(obj["w_rec"]),
    )


def params_to_json(layers: list[LayerParams], cfg: NetConfig) -> str:
    """Serialize parameters and config. Floats keep full precision (repr
    round-trip), so a 64-bit save/load cycle is bit-exact."""
    doc = {
        "version": PARAMS_FORMAT_VERSION,
        "layers": [_layer_to_json(lp) for lp in layers],
        "config": {
            "n_in": cfg.n_in,
            "layer_widths": list(cfg.layer_widths),
            "n_classes": cfg.n_classes,
            "dt_ms": cfg.dt_ms,
            "arp_steps": cfg.arp_steps,
            "precision": cfg.precision,
        },
    }
    return json.dumps(doc)


def params_from_json(text: str) -> tuple[list[LayerParams], NetConfig]:
    doc = json.loads(text)
    if doc.get("version") != PARAMS_FORMAT_VERSION:
        raise ValueError(f"unsupported parameter format version: {doc.get('version')!r}")
    c = doc["config"]
    cfg = NetConfig(
        n_in=c["n_in"],
        layer_widths=list(c["layer_widths"]),
        n_classes=c["n_classes"],
        dt_ms=c["dt_ms"],
        arp_steps=c["arp_steps"],
        precision=c["precision"],
    )
    layers = [_layer_from_json(obj) for obj in doc["layers"]]
    return layers, cfg


def save_params(path, layers, cfg) -> None:
    with open(path, "w") as fh:
        fh.write(params_to_json(layers, cfg))


def load_params(path) -> tuple[list[LayerParams], NetConfig]:
    with open(path) as fh:
        return params_from_json(fh.read())
