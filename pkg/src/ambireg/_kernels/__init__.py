"""Ray-casting kernels.

``_drr_c`` is the compiled Cython build; ``drr_py`` is the numpy fallback
with the same signatures.  Set ``AMBIREG_BACKEND=python`` to force the
fallback even when the extension is importable.
"""

import os

from . import drr_py

python_kernels = drr_py

try:
    from . import _drr_c as native_kernels
except ImportError:  # pragma: no cover - depends on the build
    native_kernels = None

_choice = os.environ.get("AMBIREG_BACKEND", "auto").lower()
if _choice == "python" or native_kernels is None:
    kernels = python_kernels
    BACKEND = "python"
else:
    kernels = native_kernels
    BACKEND = "native"

__all__ = ["BACKEND", "kernels", "native_kernels", "python_kernels"]
