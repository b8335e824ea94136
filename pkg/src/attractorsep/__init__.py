"""Time-frequency source separation with attractor embeddings.

Subpackages cover the full pipeline: a small reverse-mode autodiff engine
(``diffcore``), spectrogram and waveform tools (``dsp``), plain and
differentiable k-means (``clustering``), the separation model and training
loop (``model``, ``train``), scale-invariant quality metrics (``metrics``),
synthetic corpus generation (``data``), and a command line front end
(``cli``).
"""

__version__ = "0.1.0"
