"""Multiple-instance learning with self-paced supervised contrastive finetuning, in numpy."""

__version__ = "0.1.0"
