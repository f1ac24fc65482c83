"""Saving and restoring models and in-progress training runs.

A training checkpoint holds every parameter (including the stage-1 head),
batchnorm running statistics, the Adam moments and step count, the loss
history, the flow permutations and the architecture configs, so that
resuming continues bit-exactly.
"""

from __future__ import annotations

from dataclasses import asdict

import numpy as np

from .cinn import CINN, FlowConfig, FlowModel
from .condnet import CondNet, CondNetConfig
from .errors import FormatError
from .nn import AdamState, load_checkpoint, save_checkpoint


def _tuples(d):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def model_arrays(net: CondNet, flow: FlowModel | None = None) -> dict:
    arrays = {f"param/{k}": v for k, v in net.named_params(include_head=True)}
    arrays.update({f"buffer/{k}": v for k, v in net.named_buffers()})
    if flow is not None:
        arrays.update({f"param/{k}": v for k, v in flow.named_params()})
    return arrays


def save_state(path, net: CondNet, flow: FlowModel | None, state: AdamState | None,
               history: list, stage: int, next_epoch: int, extra: dict | None = None) -> None:
    arrays = model_arrays(net, flow)
    meta = {
        "stage": stage,
        "next_epoch": next_epoch,
        "history": history,
        "condnet": asdict(net.cfg),
        "flow": asdict(flow.cfg) if flow is not None else None,
        "perms": flow.perms if flow is not None else None,
        "adam": state.hyper() if state is not None else None,
    }
    if extra:
        meta.update(extra)
    if state is not None:
        for k in state.m:
            arrays[f"adam.m/{k}"] = state.m[k]
            arrays[f"adam.v/{k}"] = state.v[k]
    save_checkpoint(path, arrays, meta)


def _assign(target: dict, arrays: dict, prefix: str, path):
    for name, arr in target.items():
        key = prefix + name
        if key not in arrays:
            raise FormatError(f"{path}: checkpoint lacks {key}")
        if arrays[key].shape != arr.shape:
            raise FormatError(f"{path}: shape mismatch for {key}")
        arr[...] = arrays[key]


def load_state(path, rng_seed=0):
    """Rebuild ``(net, flow, state, meta)`` from a checkpoint directory.

    ``flow`` is None for stage-1 checkpoints and ``state`` is None when no
    optimizer state was stored.
    """
    arrays, meta = load_checkpoint(path)
    try:
        ccfg = CondNetConfig(**_tuples(meta["condnet"]))
        net = CondNet(ccfg, np.random.default_rng(rng_seed))
        flow = None
        if meta.get("flow") is not None:
            flow = FlowModel(ccfg.cond_dim, FlowConfig(**meta["flow"]), perms=meta["perms"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: incomplete checkpoint metadata ({exc})") from exc
    _assign(dict(net.named_params(include_head=True)), arrays, "param/", path)
    _assign(dict(net.named_buffers()), arrays, "buffer/", path)
    if flow is not None:
        _assign(dict(flow.named_params()), arrays, "param/", path)
    state = None
    if meta.get("adam") is not None:
        state = AdamState(**meta["adam"])
        for key, arr in arrays.items():
            if key.startswith("adam.m/"):
                state.m[key[7:]] = arr.copy()
            elif key.startswith("adam.v/"):
                state.v[key[7:]] = arr.copy()
    return net, flow, state, meta


def load_model(path) -> CINN:
    net, flow, _, _ = load_state(path)
    if flow is None:
        raise FormatError(f"{path}: checkpoint has no flow (stage-1 only)")
    return CINN(net, flow)
