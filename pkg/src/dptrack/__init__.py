"""Prompted transformer tracker for dark, shaky footage, built on a small numpy autodiff core.

Submodules are imported on demand so the command-line entry point can configure
thread limits before numerical libraries load.
"""

__version__ = "0.1.0"
