"""Self-supervised pretraining, fine-tuning and teacher-student consistency training on image pyramids."""

__version__ = "0.1.0"
