"""Hot numeric kernels: 3x3 stride-2 convolution and transposed convolution,
forward and backward.

Two interchangeable implementations exist: numba-jitted loop nests
(:mod:`.numba_impl`) and a pure-numpy path (:mod:`.numpy_impl`). Selection is
controlled by the ``SEMISE_BACKEND`` environment variable:

* ``auto`` (default) - numba when importable, else numpy;
* ``numba`` - require the jitted kernels, fail if numba is missing;
* ``numpy`` - force the pure-numpy fallback.

Both backends are deterministic and agree to float64 rounding; see
``benchmarks/bench_kernels.py`` for a speed comparison.
"""

import os

from ..errors import ConfigError

_choice = os.environ.get("SEMISE_BACKEND", "auto").strip().lower()
if _choice not in {"auto", "numba", "numpy"}:
    raise ConfigError(
        f"SEMISE_BACKEND must be auto, numba or numpy (got {_choice!r})"
    )

if _choice == "numpy":
    from . import numpy_impl as _impl

    BACKEND = "numpy"
else:
    try:
        from . import numba_impl as _impl

        BACKEND = "numba"
    except ImportError:
        if _choice == "numba":
            raise
        from . import numpy_impl as _impl

        BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
convt2d_forward = _impl.convt2d_forward
convt2d_backward = _impl.convt2d_backward
