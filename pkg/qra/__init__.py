"""
Quantile Regression Averaging (QRA) and its variants for probabilistic
electricity price forecasting.
"""

__version__ = "0.1.0"
