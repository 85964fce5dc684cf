"""Learning reduplication from raw waveforms with categorical-code GANs.

Pipeline pieces: a deterministic formant-synthesis corpus builder, a minimal
numpy layer library with hand-written gradients, WGAN-GP training with an
optional categorical code channel, an acoustic annotator, a lasso logistic
probe for the latent space, and exact categorical statistics.
"""

__version__ = "0.1.0"
