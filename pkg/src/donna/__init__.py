"""Desk-scale blockwise-distillation neural architecture search.

Modules, roughly in pipeline order: ``tensor``/``layers``/``optim`` (the
autodiff engine), ``blocks`` (networks and counters), ``space`` (genomes),
``data`` (synthetic dataset), ``distill`` (reference training, block
library, finetuning), ``predictor``, ``search`` and ``pipeline``.
"""
from ._accel import NUMBA_OK

__version__ = "0.1.0"
__all__ = ["NUMBA_OK", "__version__"]
