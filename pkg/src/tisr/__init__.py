"""Radiology report generation with textual inversion and self-supervised refinement."""
