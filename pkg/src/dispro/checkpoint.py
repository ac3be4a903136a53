"""Versioned binary checkpoints for trained state.

Layout: magic "DSPR", version u16, record count u32, then per record a
u16-length UTF-8 name, rank u8, one u32 per dimension, and the float32
values row-major little-endian. Loading a file whose magic or version does
not match fails loudly; applying a state dict to a model is strict in both
directions (no unknown names, no missing names) unless told otherwise.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .cohort import Modality
from .encoders import PathologyAdapter, PathwayEncoder, TextEncoder
from .multipro import MultiProModel
from .unipro import Stage1Result, UniProModel

MAGIC = b"DSPR"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: dict[str, np.ndarray], path: str | Path) -> None:
    """Write named float32 arrays; names are sorted for byte determinism."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.tobytes(order="C"))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: DSPR magic mismatch (got {magic!r})")
        head = f.read(6)
        if len(head) != 6:
            raise CheckpointError(f"{path}: truncated header")
        version, count = struct.unpack("<HI", head)
        if version != VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version} (reader is {VERSION})"
            )
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            raw = f.read(2)
            if len(raw) != 2:
                raise CheckpointError(f"{path}: truncated record header")
            (name_len,) = struct.unpack("<H", raw)
            name = f.read(name_len).decode("utf-8")
            rank_raw = f.read(1)
            if len(rank_raw) != 1:
                raise CheckpointError(f"{path}: truncated rank for {name!r}")
            (rank,) = struct.unpack("<B", rank_raw)
            dims = []
            for _ in range(rank):
                dim_raw = f.read(4)
                if len(dim_raw) != 4:
                    raise CheckpointError(f"{path}: truncated dims for {name!r}")
                dims.append(struct.unpack("<I", dim_raw)[0])
            n_values = int(np.prod(dims, dtype=np.int64)) if dims else 1
            data = f.read(4 * n_values)
            if len(data) != 4 * n_values:
                raise CheckpointError(f"{path}: truncated data for {name!r}")
            params[name] = np.frombuffer(data, dtype="<f4").reshape(dims).copy()
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after {count} records")
    return params


# ---------------------------------------------------------------------------
# Named-state export/import for the model bundles
# ---------------------------------------------------------------------------

_MOD_CHAR = {Modality.PATHOLOGY: "p", Modality.GENOMICS: "g"}


def _adapter_entries(adapter: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    if isinstance(adapter, PathologyAdapter):
        return {
            f"{prefix}.weight": adapter.weight.detach().numpy(),
            f"{prefix}.bias": adapter.bias.detach().numpy(),
        }
    if isinstance(adapter, PathwayEncoder):
        out = {}
        for layer_name in ("fc1", "fc2"):
            layer = getattr(adapter, layer_name)
            out[f"{prefix}.{layer_name}.weight"] = layer.weight.detach().numpy()
            out[f"{prefix}.{layer_name}.bias"] = layer.bias.detach().numpy()
        return out
    raise CheckpointError(f"unknown adapter type {type(adapter).__name__}")


def _apply_adapter(adapter: nn.Module, prefix: str, state: dict[str, np.ndarray]) -> set[str]:
    expected = _adapter_entries(adapter, prefix)
    used = set()
    with torch.no_grad():
        for name, current in expected.items():
            if name not in state:
                raise CheckpointError(f"checkpoint missing {name!r}")
            value = state[name]
            if value.shape != current.shape:
                raise CheckpointError(
                    f"{name!r}: shape {value.shape} != expected {current.shape}"
                )
            used.add(name)
        if isinstance(adapter, PathologyAdapter):
            adapter.weight.copy_(torch.from_numpy(state[f"{prefix}.weight"]))
            adapter.bias.copy_(torch.from_numpy(state[f"{prefix}.bias"]))
        else:
            for layer_name in ("fc1", "fc2"):
                layer = getattr(adapter, layer_name)
                layer.weight.copy_(torch.from_numpy(state[f"{prefix}.{layer_name}.weight"]))
                layer.bias.copy_(torch.from_numpy(state[f"{prefix}.{layer_name}.bias"]))
    return used


def _encoder_entries(encoder: TextEncoder) -> dict[str, np.ndarray]:
    return {
        f"encoder.{name}": tensor.detach().numpy()
        for name, tensor in encoder.state_dict().items()
    }


def _apply_encoder(encoder: TextEncoder, state: dict[str, np.ndarray]) -> set[str]:
    used = set()
    loaded = {}
    for name, tensor in encoder.state_dict().items():
        key = f"encoder.{name}"
        if key not in state:
            raise CheckpointError(f"checkpoint missing {key!r}")
        value = state[key]
        if tuple(value.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"{key!r}: shape {value.shape} != expected {tuple(tensor.shape)}"
            )
        loaded[name] = torch.from_numpy(value)
        used.add(key)
    encoder.load_state_dict(loaded)
    return used


def export_stage1(result: Stage1Result) -> dict[str, np.ndarray]:
    """Stage-1 state under the canonical names, encoder included."""
    model = result.model
    mc = _MOD_CHAR[model.modality]
    out: dict[str, np.ndarray] = {}
    context = model.template.context.detach().numpy()
    for j in range(context.shape[0]):
        out[f"unipro.{mc}.context.{j + 1}"] = context[j]
    out[f"unipro.{mc}.classreps"] = result.class_reps.detach().numpy()
    out.update(_adapter_entries(model.adapter, f"adapter.{mc}"))
    out.update(_encoder_entries(model.encoder))
    return out


def apply_stage1(
    model: UniProModel, state: dict[str, np.ndarray], strict: bool = True
) -> Stage1Result:
    """Load stage-1 state into a freshly built model; returns the result bundle."""
    mc = _MOD_CHAR[model.modality]
    used: set[str] = set()
    with torch.no_grad():
        for j in range(model.template.n_classes):
            key = f"unipro.{mc}.context.{j + 1}"
            if key not in state:
                raise CheckpointError(f"checkpoint missing {key!r}")
            value = state[key]
            if tuple(value.shape) != tuple(model.template.context[j].shape):
                raise CheckpointError(f"{key!r}: unexpected shape {value.shape}")
            model.template.context[j].copy_(torch.from_numpy(value))
            used.add(key)
    reps_key = f"unipro.{mc}.classreps"
    if reps_key not in state:
        raise CheckpointError(f"checkpoint missing {reps_key!r}")
    class_reps = torch.from_numpy(state[reps_key]).clone()
    used.add(reps_key)
    used |= _apply_adapter(model.adapter, f"adapter.{mc}", state)
    used |= _apply_encoder(model.encoder, state)
    if strict:
        unknown = set(state) - used
        if unknown:
            raise CheckpointError(f"unknown checkpoint entries: {sorted(unknown)}")
    return Stage1Result(model=model, class_reps=class_reps, epoch_losses=[])


def export_stage2(model: MultiProModel) -> dict[str, np.ndarray]:
    """Stage-2 state: placeholders, indicators, scorers, head, adapters,
    frozen class representations, and the (possibly finetuned) encoder."""
    out: dict[str, np.ndarray] = {
        "placeholder.p": model.bank.pathology.detach().numpy(),
        "placeholder.g": model.bank.genomics.detach().numpy(),
        "indicator.p": model.bank.indicator_p.detach().numpy(),
        "indicator.g": model.bank.indicator_g.detach().numpy(),
        "selfscore.p.W": model.scorer_p.W.detach().numpy(),
        "selfscore.p.w": model.scorer_p.w.detach().numpy(),
        "selfscore.g.W": model.scorer_g.W.detach().numpy(),
        "selfscore.g.w": model.scorer_g.w.detach().numpy(),
        "clshead.weight": model.cls_head.weight.detach().numpy(),
        "clshead.bias": model.cls_head.bias.detach().numpy(),
        "unipro.p.classreps": model.class_reps_p.detach().numpy(),
        "unipro.g.classreps": model.class_reps_g.detach().numpy(),
    }
    out.update(_adapter_entries(model.adapter_p, "adapter.p"))
    out.update(_adapter_entries(model.adapter_g, "adapter.g"))
    out.update(_encoder_entries(model.encoder))
    return out


def apply_stage2(
    model: MultiProModel, state: dict[str, np.ndarray], strict: bool = True
) -> MultiProModel:
    direct = {
        "placeholder.p": model.bank.pathology,
        "placeholder.g": model.bank.genomics,
        "indicator.p": model.bank.indicator_p,
        "indicator.g": model.bank.indicator_g,
        "selfscore.p.W": model.scorer_p.W,
        "selfscore.p.w": model.scorer_p.w,
        "selfscore.g.W": model.scorer_g.W,
        "selfscore.g.w": model.scorer_g.w,
        "clshead.weight": model.cls_head.weight,
        "clshead.bias": model.cls_head.bias,
        "unipro.p.classreps": model.class_reps_p,
        "unipro.g.classreps": model.class_reps_g,
    }
    used: set[str] = set()
    with torch.no_grad():
        for name, tensor in direct.items():
            if name not in state:
                raise CheckpointError(f"checkpoint missing {name!r}")
            value = state[name]
            if tuple(value.shape) != tuple(tensor.shape):
                raise CheckpointError(
                    f"{name!r}: shape {value.shape} != expected {tuple(tensor.shape)}"
                )
            tensor.copy_(torch.from_numpy(value))
            used.add(name)
    used |= _apply_adapter(model.adapter_p, "adapter.p", state)
    used |= _apply_adapter(model.adapter_g, "adapter.g", state)
    used |= _apply_encoder(model.encoder, state)
    if strict:
        unknown = set(state) - used
        if unknown:
            raise CheckpointError(f"unknown checkpoint entries: {sorted(unknown)}")
    return model
