"""Expert linking: contrastive pre-training of an encoder + kernel-pooling
metric, adversarial fine-tuning toward external sources, zero-shot linking
with human feedback."""

from .model import LinkingModel

__all__ = ["LinkingModel"]
