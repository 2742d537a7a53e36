__version__ = "1.0.0"

from . import (
    accounting,
    attention,
    dataset,
    decoder,
    encoder,
    metrics,
    model,
    objects,
    tensor,
    training,
)

__all__ = [
    "accounting",
    "attention",
    "dataset",
    "decoder",
    "encoder",
    "metrics",
    "model",
    "objects",
    "tensor",
    "training",
]
