"""Self-supervised video pretraining on synthetic motion data.

Siamese masked-reconstruction + contrastive training with a built-in
reverse-mode autodiff engine, plus dataset generation, finetuning, and
multi-view evaluation. See README.md for the CLI.
"""

import os

# The model's matrices are small; BLAS thread fan-out costs more than it
# saves and single-threaded kernels keep runs reproducible everywhere.
# Only effective if numpy has not been imported yet.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

__version__ = "0.1.0"
