"""Dataset distillation with pre-trained model supervision (CLoM / CCLoM)."""

__version__ = "0.1.0"
