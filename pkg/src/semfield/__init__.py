"""Implicit 3D semantic-field engine.

Learns a mapping from world coordinates to semantic and visual embedding
vectors from weakly supervised RGB-D back-projections, and answers
segmentation, object-location, and view-localization queries against the
trained field.

Submodules are imported lazily so that the CLI entry point can cap BLAS
thread pools (SEMFIELD_THREADS) before numpy is loaded.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "geometry",
    "dataset",
    "encoding",
    "network",
    "training",
    "query",
    "synth",
    "cli",
    "errors",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        module = importlib.import_module(f"{__name__}.{name}")
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
