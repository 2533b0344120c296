"""Adaptation modules: background decoupling, reconstruction, discriminator, losses and training."""
