"""polyscore: desk-scale candidate-selection engine with Bi-, Cross- and
Poly-encoder scoring, training, candidate caching and latency benchmarking."""

import os

__version__ = "0.1.0"

# Cap math-library thread pools before numpy is first imported so the env
# var actually takes effect. Best effort: a prior numpy import wins.
_threads = os.environ.get("POLYSCORE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
