"""Masked self-supervised pretraining and porosity/permeability fine-tuning
for a compact CNN-attention model on voxel sub-cubes, on plain numpy."""

__version__ = "0.1.0"
