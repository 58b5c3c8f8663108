"""Frozen bidirectional masked LM with trainable visual inputs, desk scale.

A small BERT-style encoder is pretrained on synthetic text, frozen, and
extended with a trainable per-frame visual projection plus bottleneck
adapters. Video QA is then answered zero-shot (or after light finetuning)
by filling a [MASK] slot in a templated prompt.
"""

import os

# Pin BLAS to one thread before numpy loads anything: multi-threaded GEMM
# reorders reductions and breaks bit-reproducibility across runs.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
