from .init import xavier_init
from .layers import (
    BiLSTM,
    ConcatDemographics,
    Conv1D,
    Dense,
    Dropout,
    LeakyReLU,
    MaxPool1D,
    ResConvBlock,
    Sequential,
    Softmax,
    Tape,
    TCNBlock,
    TimeDistributed,
    WindowReshape,
)
from .models import (
    DTSConfig,
    FEConfig,
    Model,
    SleepPPGConfig,
    backward,
    build_bm_dts,
    build_bm_fe,
    build_model,
    build_sleepppg_net,
    forward,
)
from .spgw import load_weights, read_weights, save_weights

__all__ = [
    "BiLSTM", "ConcatDemographics", "Conv1D", "Dense", "Dropout", "LeakyReLU",
    "MaxPool1D", "ResConvBlock", "Sequential", "Softmax", "Tape", "TCNBlock",
    "TimeDistributed", "WindowReshape", "DTSConfig", "FEConfig", "Model",
    "SleepPPGConfig", "backward", "build_bm_dts", "build_bm_fe", "build_model",
    "build_sleepppg_net", "forward", "load_weights", "read_weights",
    "save_weights", "xavier_init",
]
