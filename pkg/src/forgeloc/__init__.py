"""Toy-scale [SEG]-token reasoning segmentation for localizing edited image regions.

A tiny multimodal transformer reads an image and a fixed prompt, answers
with a templated response containing a ``[SEG]`` token, and the hidden
state at that token conditions a mask decoder that segments the edit.
"""

__version__ = "0.1.0"
