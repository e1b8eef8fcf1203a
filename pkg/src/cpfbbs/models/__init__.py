"""Reference Feynman-Kac models."""
