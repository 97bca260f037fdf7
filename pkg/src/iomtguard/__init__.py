"""Intrusion-detection agent for medical IoT traffic.

Request authentication on a hash-chained ledger, a known-pattern store,
binary whale-optimization feature selection and a numpy BiLSTM
classifier, plus the metrics and significance tests used to evaluate
them.
"""

__version__ = "0.1.0"
