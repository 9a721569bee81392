"""Explicit-state checker for the abstract tree-2PC transition relation.

The successor kernel is compiled with Cython when the extension is built
(``python setup.py build_ext --inplace`` or an editable install); otherwise
the pure-Python kernel is used. Set ``TREE2PC_PURE_KERNEL=1`` to force the
fallback.
"""
import os

from . import _kernel_py

if os.environ.get("TREE2PC_PURE_KERNEL"):
    kernel = _kernel_py
    KERNEL_NAME = "python"
else:
    try:
        from . import _kernel as kernel  # type: ignore[attr-defined]

        KERNEL_NAME = "cython"
    except ImportError:
        kernel = _kernel_py
        KERNEL_NAME = "python"

from .explore import (  # noqa: E402
    CheckConfig,
    ExplorationBudget,
    Report,
    WorldState,
    conformance_replay,
    enabled_actions,
    explore,
    tree_configs,
)

__all__ = [
    "CheckConfig",
    "ExplorationBudget",
    "KERNEL_NAME",
    "Report",
    "WorldState",
    "conformance_replay",
    "enabled_actions",
    "explore",
    "kernel",
    "tree_configs",
]
