"""Federated learning with seed-replayed multi-projected directional derivatives."""

from .compressors import CompressorConfig, UplinkMessage, compress, decompress
from .data import ClientShard, Dataset, parse_idx, partition, synth_logistic
from .federation import ExperimentConfig, RoundRecord, run_experiment, run_round
from .models import MLP1, Batch, Logistic, ModelState, loss_and_grad
from .projection import ProjectionSpec, decode_mpdd, encode_mpdd, rademacher_direction

__all__ = [
    "Batch",
    "ClientShard",
    "CompressorConfig",
    "Dataset",
    "ExperimentConfig",
    "Logistic",
    "MLP1",
    "ModelState",
    "ProjectionSpec",
    "RoundRecord",
    "UplinkMessage",
    "compress",
    "decode_mpdd",
    "decompress",
    "encode_mpdd",
    "loss_and_grad",
    "parse_idx",
    "partition",
    "rademacher_direction",
    "run_experiment",
    "run_round",
    "synth_logistic",
]
