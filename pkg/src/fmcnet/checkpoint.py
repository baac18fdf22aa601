"""Checkpoint file format.

Layout: magic bytes b"FMCK", one version byte, a little-endian uint32
manifest length, the JSON manifest (config echo, ordered parameter table
with names/shapes/element offsets, step count, seed), then all parameter
data as contiguous little-endian float32. Training runs in float64;
storage quantizes to float32, so a round-trip is exact to float32
resolution.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"FMCK"
VERSION = 1


def save_checkpoint(path, config: dict, named_params, step: int, seed: int) -> None:
    entries = []
    blobs = []
    offset = 0
    seen = set()
    for name, tensor in named_params:
        if name in seen:
            raise ValueError(f"duplicate parameter name {name!r}")
        seen.add(name)
        data = np.ascontiguousarray(tensor.data, dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.size
    manifest = json.dumps(
        {
            "format_version": VERSION,
            "config": config,
            "params": entries,
            "total_elements": offset,
            "step": int(step),
            "seed": int(seed),
        },
        sort_keys=True,
    ).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (config dict, {name: float64 array}, step, seed)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    if blob[4] != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob[4]}")
    (manifest_len,) = struct.unpack("<I", blob[5:9])
    manifest = json.loads(blob[9 : 9 + manifest_len].decode("utf-8"))
    data = np.frombuffer(blob[9 + manifest_len :], dtype="<f4")
    if data.size != manifest["total_elements"]:
        raise ValueError(
            f"{path}: parameter payload has {data.size} elements, manifest says {manifest['total_elements']}"
        )
    params = {}
    for entry in manifest["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = data[entry["offset"] : entry["offset"] + size]
        params[entry["name"]] = chunk.astype(np.float64).reshape(entry["shape"])
    return manifest["config"], params, manifest["step"], manifest["seed"]


def restore_network(path):
    """Rebuild a network from a checkpoint, loading its stored parameters."""
    from .net import BaselineNet, FmcNet, NetworkConfig

    config, params, step, seed = load_checkpoint(path)
    net_cfg = NetworkConfig.from_dict(config["network"])
    if config.get("variant", "full") == "baseline":
        net = BaselineNet(net_cfg, seed=seed, widths=config["baseline_widths"])
    else:
        net = FmcNet(net_cfg, seed=seed)
    named = dict(net.named_parameters())
    if set(named) != set(params):
        missing = sorted(set(named) - set(params))
        extra = sorted(set(params) - set(named))
        raise ValueError(f"{path}: parameter table mismatch (missing {missing}, extra {extra})")
    for name, tensor in named.items():
        if tuple(tensor.data.shape) != tuple(params[name].shape):
            raise ValueError(
                f"{path}: parameter {name} has shape {params[name].shape}, expected {tuple(tensor.data.shape)}"
            )
        tensor.data[...] = params[name]
    return net, config, step, seed


def network_checkpoint_config(net) -> dict:
    config = {"variant": net.variant, "network": net.config.to_dict()}
    if net.variant == "baseline":
        config["baseline_widths"] = net.widths
    return config
