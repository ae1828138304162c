"""voxseg: query-based 3D volumetric segmentation at desk scale.

A from-scratch stack: numpy-backed tensors with hand-written gradients
(compiled kernels for the hot paths), a UNet-style encoder/decoder, five
segmentation-head formulations up to fully decoupled mask/class
prediction, full-scale deformable feature fusion, Hungarian-matched set
losses, and a synthetic-phantom training harness.
"""

__version__ = "0.1.0"
