"""Diffeomorphic registration of weighted point clouds with auto-decoder
stationary velocity fields, TPS/CPD shape augmentation and latent sampling."""

__version__ = "0.1.0"
