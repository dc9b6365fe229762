"""Approximate nonlinear character rig deformations with small networks on
top of a linear-blend-skinning baseline.

Submodules import numpy and friends; keep this file import-light so the CLI
can configure the BLAS thread environment before they load.
"""

__version__ = "0.1.0"
