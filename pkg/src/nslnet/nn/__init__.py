from .checkpoint import load_checkpoint, save_checkpoint
from .graph import LayerGraph, LayerSpec, build_digit_net, digit_net_specs
from .layers import (
    Concat,
    Conv2D,
    Dense,
    Flatten,
    MaxPool,
    NiN,
    NSLLayer,
    ReLU,
    Softmax,
    softmax_nll_loss,
    xavier_init,
)
from .train import TrainConfig, evaluate_accuracy, fit, learning_rate, sgd_step, train_epoch
