"""Toolkit for multi-label stuttered-speech classification experiments.

Pipeline: WAV audio -> normalized log-Mel spectrograms -> encoder-only
transformer -> six-way multi-label disfluency logits, trained under
configurable layer-freezing regimes on a dataset curated by concatenating
same-speaker clips, and scored with micro/macro/weighted F1.
"""

__version__ = "0.1.0"
