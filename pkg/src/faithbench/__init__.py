"""Explanation-guided, robustness-regularized text classifiers and faithfulness metrics."""

__version__ = "0.1.0"
