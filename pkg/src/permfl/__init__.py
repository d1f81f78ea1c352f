"""Encrypted permutation-compressed gradient descent for federated learning."""

from permfl.compress import Assignment, SparseChunk, assemble, sample_assignment
from permfl.engine import Algorithm, RunConfig, run, tune_step_size
from permfl.numkit import Precision, Problem, generate_problem
from permfl.secenv import Envelope, keygen, open, seal

__all__ = [
    "Algorithm", "Assignment", "Envelope", "Precision", "Problem", "RunConfig", "SparseChunk",
    "assemble", "generate_problem", "keygen", "open", "run", "sample_assignment", "seal",
    "tune_step_size",
]
__version__ = "0.1.0"
