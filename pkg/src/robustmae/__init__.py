"""Desk-scale lab for masked-autoencoder adversarial robustness and
test-time frequency-domain prompting."""

__version__ = "0.1.0"
