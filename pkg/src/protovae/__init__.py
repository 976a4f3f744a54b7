"""ProtoVAE: a variational-autoencoder prototypical classifier with LRP explanations."""

import os as _os

__version__ = "0.1.0"

# PROTOVAE_THREADS caps the BLAS/OpenMP pools; it must be applied before
# numpy loads its BLAS, hence here rather than in the CLI.
_threads = _os.environ.get("PROTOVAE_THREADS")
if _threads and _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)
