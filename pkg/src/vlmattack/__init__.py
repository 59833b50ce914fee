"""Targeted black-box adversarial attacks on image-grounded text
generation: transfer-based feature matching on white-box surrogate
encoders, query-based zero-order refinement against the victim, and an
embedding-similarity evaluation harness."""

__version__ = "0.1.0"
