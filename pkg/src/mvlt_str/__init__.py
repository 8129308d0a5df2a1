"""
MVLT scene-text recognition toolkit

A masked vision-language transformer trained in two stages (masked
pretraining, then fine-tuning with iterative correction) on synthetic word
images, built on a small numpy autodiff engine.
"""

__version__ = "1.0.0"
