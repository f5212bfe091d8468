"""Audiovisual blendshape facial animation: offline coefficient fitting and a modality-dropout network."""

__version__ = "0.1.0"
