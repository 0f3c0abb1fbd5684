"""Genotype-to-phenotype yield prediction with genotype-by-environment attention."""

__version__ = "0.1.0"
