"""sketchalign: text-bridged cross-modal attention alignment for zero-shot
sketch-based image retrieval, small enough to train and test on a CPU."""

__version__ = "0.1.0"
