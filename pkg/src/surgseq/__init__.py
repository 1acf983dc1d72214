"""Online two-level surgical workflow recognition.

Recognizes surgical phases and steps from windowed observations (tool
presence or motion features) in real time, with three statistical model
families (BN+HMMs, BN+CRFs, HHMM), a synthetic data generator and a
cross-validated ROC-AUC evaluation harness.
"""

__version__ = "0.1.0"
