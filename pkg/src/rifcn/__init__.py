"""RiFCN: bidirectional fully convolutional segmentation with recurrent
top-down feature fusion, implemented on numpy."""

from .model import (
    IGNORE,
    ForwardStreamSpec,
    RiFCNModel,
    backprop,
    backward_stream_fuse,
    build_model,
    compute_loss,
    deserialize_model,
    forward,
    forward_stream,
    predict,
    serialize_model,
)
from .optim import NadamState, SgdMomentumState, TrainConfig, nadam_step, sgd_momentum_step, train

__version__ = "0.1.0"
