"""Cross-lingual speaker verification lab: synthetic corpus, deep speaker
features, an i-vector baseline, and cosine/LDA/PLDA scoring."""

__version__ = "0.1.0"
