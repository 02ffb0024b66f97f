"""Self-supervised video representation learning at desk scale.

Subpackages are imported lazily so the CLI can apply thread-count
environment settings before numpy loads.
"""

__version__ = "0.1.0"

_MODULES = (
    "tensor",
    "optim",
    "encoder",
    "nce",
    "moco",
    "rng",
    "data",
    "synthetic",
    "train",
    "evaluate",
    "cli",
)


def __getattr__(name):
    if name in _MODULES:
        import importlib

        mod = importlib.import_module(f".{name}", __name__)
        globals()[name] = mod
        return mod
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
