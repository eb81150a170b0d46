"""Run-time C code generation with a caching JIT and empirical kernel tuning.

The toolkit generates C source at run time (string templates or syntax
trees), compiles it through the system C compiler into a content-addressed
on-disk cache, loads the result as a shared library, and drives it over typed
n-dimensional arrays.  Variant parameters (unroll depth, worker count,
chunking) are selected empirically by timing candidate kernels.
"""

from ._version import TOOLKIT_VERSION

__version__ = TOOLKIT_VERSION
