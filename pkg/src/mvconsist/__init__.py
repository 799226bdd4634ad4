"""View-consistency regularisation for a toy camera-conditioned video
diffusion model, with a synthetic ray-cast dataset and exact 3D labels."""

__version__ = "0.1.0"
