"""Transformer and LSTM captioners for surgical instruction generation, trained
with teacher forcing and self-critical CIDEr-D fine-tuning, built on a small
numpy autodiff engine."""

__version__ = "0.1.0"
