"""Cross-view training for sequence tagging on a CNN-BiLSTM encoder."""

__version__ = "0.1.0"
