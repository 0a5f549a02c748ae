"""Token merging for semantic binding in text-to-image diffusion."""
