"""
Noise covariance estimation for linear Kalman filters
Primary-measurement likelihood plus sparse supervisory measurements, differentiated in forward and reverse mode
"""

__version__ = "1.0.0"
