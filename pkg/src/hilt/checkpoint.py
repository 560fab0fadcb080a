"""Single-file binary checkpoints for trained policies.

Layout: 8-byte magic, u32 format version, u64 header length, a JSON header
describing every stored array (section, key, dtype, shape, offset), then the
raw little-endian array payload.  Loading reconstructs the policy objects
from the embedded configs; schedules and other derived state are rebuilt
rather than stored.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from . import dense_policy, waypoint_policy

CKPT_MAGIC = b"HILTCKP1"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _state_arrays(module: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def save_checkpoint(path, kind: str, config: dict, sections: dict, extra=None):
    entries = []
    blobs = []
    offset = 0
    for sec_name in sorted(sections):
        # state-dict insertion order is preserved within a section
        for key in sections[sec_name]:
            arr = np.ascontiguousarray(sections[sec_name][key])
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            blob = arr.tobytes()
            entries.append(
                {
                    "section": sec_name,
                    "key": key,
                    "dtype": arr.dtype.name,
                    "shape": list(arr.shape),
                    "offset": offset,
                    "nbytes": len(blob),
                }
            )
            blobs.append(blob)
            offset += len(blob)
    header = {
        "version": CKPT_VERSION,
        "kind": kind,
        "config": config,
        "extra": extra or {},
        "entries": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


@dataclass
class Checkpoint:
    kind: str
    config: dict
    extra: dict
    sections: dict


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CKPT_MAGIC) + 12 or not raw.startswith(CKPT_MAGIC):
        raise CheckpointError("not a checkpoint file")
    version, header_len = struct.unpack_from("<IQ", raw, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(CKPT_MAGIC) + 12
    try:
        header = json.loads(raw[start : start + header_len])
    except ValueError as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    payload = raw[start + header_len :]
    sections: dict = {}
    for ent in header["entries"]:
        blob = payload[ent["offset"] : ent["offset"] + ent["nbytes"]]
        if len(blob) != ent["nbytes"]:
            raise CheckpointError("truncated checkpoint payload")
        arr = (
            np.frombuffer(blob, dtype=np.dtype(ent["dtype"]))
            .reshape(ent["shape"])
            .copy()
        )
        sections.setdefault(ent["section"], {})[ent["key"]] = arr
    return Checkpoint(
        kind=header["kind"],
        config=header["config"],
        extra=header["extra"],
        sections=sections,
    )


def _load_into(module: torch.nn.Module, arrays: dict):
    state = {k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()}
    module.load_state_dict(state)


# ---------------------------------------------------------------------------
# waypoint policy

def save_waypoint(path, trained: waypoint_policy.TrainedWaypoint, extra=None):
    xtra = {
        "train_config": dataclasses.asdict(trained.train_config),
        "history": [float(x) for x in trained.history],
    }
    if extra:
        xtra.update(extra)
    save_checkpoint(
        path,
        "waypoint",
        dataclasses.asdict(trained.model_config),
        {
            "model": _state_arrays(trained.model),
            "ema": _state_arrays(trained.ema_model),
        },
        xtra,
    )


def load_waypoint(path) -> waypoint_policy.TrainedWaypoint:
    ck = load_checkpoint(path)
    if ck.kind != "waypoint":
        raise CheckpointError(f"expected a waypoint checkpoint, got {ck.kind!r}")
    mc = waypoint_policy.WaypointModelConfig(**ck.config)
    model = waypoint_policy.WaypointPolicy(mc)
    _load_into(model, ck.sections["model"])
    ema = waypoint_policy.WaypointPolicy(mc)
    _load_into(ema, ck.sections["ema"])
    model.eval()
    ema.eval()
    tc_raw = ck.extra.get("train_config")
    tc = (
        waypoint_policy.WaypointTrainConfig(**tc_raw)
        if tc_raw
        else waypoint_policy.WaypointTrainConfig()
    )
    return waypoint_policy.TrainedWaypoint(
        model=model,
        ema_model=ema,
        history=list(ck.extra.get("history", [])),
        model_config=mc,
        train_config=tc,
    )


# ---------------------------------------------------------------------------
# dense policy

def save_dense(path, trained: dense_policy.TrainedDense, extra=None):
    xtra = {
        "train_config": dataclasses.asdict(trained.train_config),
        "history": [float(x) for x in trained.history],
    }
    if extra:
        xtra.update(extra)
    stats = trained.stats
    save_checkpoint(
        path,
        "dense",
        dataclasses.asdict(trained.model_config),
        {
            "model": _state_arrays(trained.model),
            "ema": _state_arrays(trained.ema_model),
            "stats": {
                "action_min": stats.action_min,
                "action_max": stats.action_max,
                "proprio_min": stats.proprio_min,
                "proprio_max": stats.proprio_max,
            },
        },
        xtra,
    )


def load_dense(path) -> dense_policy.TrainedDense:
    ck = load_checkpoint(path)
    if ck.kind != "dense":
        raise CheckpointError(f"expected a dense checkpoint, got {ck.kind!r}")
    raw = dict(ck.config)
    raw["image_channels"] = tuple(raw["image_channels"])
    raw["unet_channels"] = tuple(raw["unet_channels"])
    mc = dense_policy.DenseModelConfig(**raw)
    model = dense_policy.DenseDenoiser(mc)
    _load_into(model, ck.sections["model"])
    ema = dense_policy.DenseDenoiser(mc)
    _load_into(ema, ck.sections["ema"])
    model.eval()
    ema.eval()
    st = ck.sections["stats"]
    stats = dense_policy.NormStats(
        action_min=np.asarray(st["action_min"], dtype=np.float64),
        action_max=np.asarray(st["action_max"], dtype=np.float64),
        proprio_min=np.asarray(st["proprio_min"], dtype=np.float64),
        proprio_max=np.asarray(st["proprio_max"], dtype=np.float64),
    )
    tc_raw = ck.extra.get("train_config")
    tc = (
        dense_policy.DenseTrainConfig(**tc_raw)
        if tc_raw
        else dense_policy.DenseTrainConfig()
    )
    return dense_policy.TrainedDense(
        model=model,
        ema_model=ema,
        stats=stats,
        schedule=dense_policy.make_schedule(mc.diffusion_steps, mc.schedule),
        model_config=mc,
        train_config=tc,
        history=list(ck.extra.get("history", [])),
    )
