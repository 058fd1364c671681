"""
zimed - Causal mediation analysis for zero-inflated count mediators
"""

__version__ = "0.1.0"
