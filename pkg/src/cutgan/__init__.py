"""One-sided unpaired image translation with a patchwise contrastive loss."""

__version__ = "0.1.0"

TEMPERATURE = 0.07
PATCHES_PER_LAYER = 256
EMBED_DIM = 256
