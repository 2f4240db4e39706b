"""Beam Align.

Deep-learning mmWave beam alignment with conformal DkNN credibility: channel
synthesis, RSSI sweeps, a from-scratch classifier, FGSM robustness checks and
the evaluation report, wired together as a LangGraph pipeline.
"""

from beam_align.graph import graph

__all__ = ["graph"]
