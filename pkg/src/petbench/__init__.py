"""Low-count PET denoising benchmark."""
