"""Multi-label ICD-9 code prediction from clinical notes with a BERT-style encoder."""

__version__ = "0.1.0"
