"""
Model families: transformer autoencoders, convolutional autoencoder and
feed-forward classifier.
"""
from riskformer.models.base import (  # noqa: F401
    ModelBase,
    ParameterStore,
    average_reconstruction_error,
    load_checkpoint,
    reconstruction_error,
    save_checkpoint,
)
