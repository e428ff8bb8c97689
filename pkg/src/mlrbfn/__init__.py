"""Multi-layer RBF networks with confidence depression.

Training, initialization, and evaluation tooling for RBF networks that
fold out-of-distribution detection into the classifier itself, plus an
MLP/max-softmax baseline for comparison.
"""

__version__ = "0.1.0"
