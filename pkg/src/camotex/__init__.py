"""Adversarial camouflage textures for meshes: differentiable and reference
rendering, mask-based composition, texture attack and detector evaluation."""

__version__ = "0.1.0"
