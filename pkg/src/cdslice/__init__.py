"""Slice-based surrogate model for vehicle drag coefficients.

Point clouds are cut into streamwise slices, each slice is embedded by a
shared point-wise network with masked max pooling, a bidirectional LSTM reads
the slice sequence and an MLP regresses Cd. Everything, including automatic
differentiation, is implemented on numpy.
"""

__version__ = "0.1.0"
