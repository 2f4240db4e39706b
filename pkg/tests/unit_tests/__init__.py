"""Unit tests for the beam_align modules."""
