"""Desk-scale tactile marble manipulation lab.

A synthetic two-finger tactile simulator feeds a keypoint-bottleneck
autoencoder; a learned dynamics model over the 14-D keypoint/joint state
drives a CEM model-predictive controller that rolls a simulated marble
to goal positions.
"""

__version__ = "0.1.0"
