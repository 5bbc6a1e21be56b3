"""End-to-end neural diarization with intermediate speaker labels.

Submodules: ``nncore`` (autodiff), ``model``, ``loss``, ``datagen``,
``trainer``, ``metrics``, ``config`` and ``cli``. Nothing heavy is imported
here so the command line can cap BLAS threads before numpy loads.
"""
__version__ = "0.1.0"
