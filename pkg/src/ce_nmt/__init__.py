"""Desk-scale context-enhanced neural machine translation.

A transformer encoder-decoder trained on translation, a context
enhancement (CE) stage that aligns pooled sentence embeddings of
parallel sentences with the Barlow Twins loss, and evaluation probes
for language-agnosticism, BLEU, and diagnostics.
"""

__version__ = "0.1.0"
