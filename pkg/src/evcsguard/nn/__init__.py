"""From-scratch recurrent detectors: layers, networks, Adam and training."""

from .layers import LSTM, BatchNorm, ConvLSTM2D, Dense, Dropout, Flatten, LeakyReLU, Reshape, Sigmoid
from .network import (ModelCheckpoint, Network, NetworkSpec, backward, bce_loss, build, convlstm_spec,
                      forward, lstm_spec)
from .train import (AdamState, TrainConfig, adam_step, classify, grad_check, predict, recalibrate_batchnorm,
                    train)
