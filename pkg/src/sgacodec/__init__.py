"""Lossy image codec toolkit: hierarchical latent-variable model, annealed
discrete inference at compression time, and bits-back entropy coding on a
bit-exact rANS backend."""

__version__ = "0.1.0"
