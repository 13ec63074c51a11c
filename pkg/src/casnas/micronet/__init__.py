from .autodiff import Tape, Var
from .data import Batch, SyntheticClusters, TensorDataset, load_dump, save_dump
from .network import (BackwardResult, ForwardCache, SGDHyper, SGDState, SliceMap, SupernetWeights,
                      apply_update, as_index, backward, forward, init_weights, logits_of,
                      loss_and_grads, mask_of, param_shapes, plan, resize_inputs, shared_params,
                      slice_map)

__all__ = [
    "BackwardResult", "Batch", "ForwardCache", "SGDHyper", "SGDState", "SliceMap", "SupernetWeights",
    "SyntheticClusters", "Tape", "TensorDataset", "Var", "apply_update", "as_index", "backward",
    "forward", "init_weights", "load_dump", "logits_of", "loss_and_grads", "mask_of", "param_shapes",
    "plan", "resize_inputs", "save_dump", "shared_params", "slice_map",
]
