"""Layer-attention fusion and multi-objective distillation for noisy seq2seq recognition."""

__version__ = "0.1.0"
