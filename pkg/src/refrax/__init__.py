"""refrax: adaptive LIF spiking networks with refractory-block acceleration.

Submodules are imported lazily so the CLI can cap BLAS thread counts via the
REFRAX_THREADS environment variable before numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "params",
    "standard",
    "blocks",
    "training",
    "fitting",
    "data",
    "bench",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module 'refrax' has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
