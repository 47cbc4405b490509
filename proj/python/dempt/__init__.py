"""Decoding-enhanced multi-phase prompt tuning for context-aware translation.

Thin wrapper around the C++ core; see the project README for the CLI, which
exposes the same operations.
"""

from ._core import Translator, bleu, generate_data, grad_check, train

__all__ = ["Translator", "bleu", "generate_data", "grad_check", "train"]
