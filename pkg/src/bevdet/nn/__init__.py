from .layers import (
    Add,
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Module,
    Mul,
    ReLU,
    Sigmoid,
    Softmax,
    channel_softmax,
    check_tensor4,
    sigmoid,
)
from .gradcheck import grad_check, numeric_gradient, relative_error
from .checkpoint import load_checkpoint, save_checkpoint, state_dict, load_state_dict
