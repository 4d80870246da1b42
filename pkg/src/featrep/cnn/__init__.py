from .layers import conv_forward, conv_transpose, maxpool_forward, unpool
from .network import (
    Checkpoint,
    ForwardResult,
    backprop,
    backward,
    forward,
    init_weights,
    loss_cross_entropy,
    predict_proba,
)
from .spec import LayerSpec, NetworkSpec, builtin_spec, extraction_points, feature_shapes, shape_plan
from .train import (
    TrainConfig,
    TrainResult,
    accuracy,
    bagged_predict,
    bagged_proba,
    max_norm_,
    member_seeds,
    sgd_momentum_step,
    train,
)
