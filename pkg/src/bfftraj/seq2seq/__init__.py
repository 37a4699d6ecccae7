"""Transformer trajectory estimator and constant-velocity baseline."""

from .baseline import constant_velocity_baseline
from .model import (
    ModelParams, TransformerConfig, attention, causal_mask, decode_autoregressive,
    decode_step_outputs, encode, init_params, multi_head, pe_table, positional_encoding,
)
from .training import EpochRecord, TrainConfig, TrainResult, encoder_inputs, predict, save_loss_log, train

__all__ = [
    "ModelParams", "TransformerConfig", "attention", "causal_mask", "decode_autoregressive",
    "decode_step_outputs", "encode", "init_params", "multi_head", "pe_table", "positional_encoding",
    "constant_velocity_baseline", "EpochRecord", "TrainConfig", "TrainResult", "encoder_inputs",
    "predict", "save_loss_log", "train",
]
