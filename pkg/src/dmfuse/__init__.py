"""Two-stage diffusion-feature multimodal image fusion."""
__version__ = "0.1.0"
