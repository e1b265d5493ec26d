"""Single-file checkpoint container.

Layout (all integers little-endian)::

    b"THCKPT\\0\\0"  magic
    u32             format version
    u64             header length N
    N bytes         JSON header: step, config snapshot, metadata, tensor index
    ...             raw tensor bytes, little-endian, at the offsets listed

Model tensors are stored as float32 (integer buffers as int64), optimizer
state as float64.  The header is written with sorted keys so equal contents
give byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"THCKPT\0\0"
FORMAT_VERSION = 1

_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8", "u1": "|u1"}


def _code_for(t: torch.Tensor, optimizer: bool) -> str:
    if t.dtype == torch.uint8:
        return "u1"
    if t.is_floating_point():
        return "f8" if optimizer else "f4"
    return "i8"


@dataclass
class Checkpoint:
    step: int = 0
    tensors: dict = field(default_factory=dict)  # model state, name -> tensor
    optimizer: dict = field(default_factory=dict)  # name -> tensor
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    rng: torch.Tensor | None = None

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        index, blobs, offset = [], [], 0
        entries = [("model/" + k, v, False) for k, v in self.tensors.items()]
        entries += [("opt/" + k, v, True) for k, v in self.optimizer.items()]
        if self.rng is not None:
            entries.append(("rng", self.rng, False))
        for name, t, is_opt in entries:
            code = _code_for(t, is_opt)
            arr = t.detach().cpu().numpy().astype(_DTYPES[code])
            raw = np.ascontiguousarray(arr).tobytes()
            index.append(
                {"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
            )
            blobs.append(raw)
            offset += len(raw)
        header = json.dumps(
            {"format_version": FORMAT_VERSION, "step": self.step, "config": self.config,
             "meta": self.meta, "tensors": index},
            sort_keys=True,
        ).encode()
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
            fh.write(header)
            for raw in blobs:
                fh.write(raw)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        data = Path(path).read_bytes()
        if data[: len(MAGIC)] != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        start = len(MAGIC) + struct.calcsize("<IQ")
        header = json.loads(data[start : start + hlen])
        base = start + hlen
        ckpt = cls(step=header["step"], config=header["config"], meta=header["meta"])
        for entry in header["tensors"]:
            lo = base + entry["offset"]
            count = int(np.prod(entry["shape"], dtype=np.int64))
            arr = np.frombuffer(data, dtype=_DTYPES[entry["dtype"]], count=count, offset=lo)
            arr = arr.reshape(entry["shape"]).astype(arr.dtype.newbyteorder("="))
            t = torch.from_numpy(arr.copy())
            name = entry["name"]
            if name == "rng":
                ckpt.rng = t
            elif name.startswith("model/"):
                ckpt.tensors[name[len("model/") :]] = t
            else:
                ckpt.optimizer[name[len("opt/") :]] = t
        return ckpt

    def module_state(self, prefix: str) -> dict:
        """State dict of one sub-network, e.g. ``module_state("audio2au")``."""
        p = prefix + "."
        return {k[len(p) :]: v for k, v in self.tensors.items() if k.startswith(p)}

    def has_module(self, prefix: str) -> bool:
        return any(k.startswith(prefix + ".") for k in self.tensors)


def state_to_tensors(module: torch.nn.Module, prefix: str = "") -> dict:
    p = prefix + "." if prefix else ""
    return {p + k: v.detach().clone() for k, v in module.state_dict().items()}


def load_into(module: torch.nn.Module, state: dict) -> None:
    """Copy float32-stored tensors into ``module`` keeping its own dtypes."""
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise KeyError(f"checkpoint mismatch; missing {missing[:5]}, unexpected {unexpected[:5]}")
    module.load_state_dict({k: state[k].to(own[k].dtype) for k in own})


def optimizer_to_tensors(opt: torch.optim.Optimizer, names: dict) -> dict:
    """Flatten Adam state to ``<param name>/<slot>`` tensors.

    ``names`` maps id(param) -> parameter name.
    """
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            state = opt.state.get(p)
            if not state:
                continue
            for slot, value in state.items():
                out[f"{names[id(p)]}/{slot}"] = torch.as_tensor(value).detach().clone()
    return out


def load_optimizer(opt: torch.optim.Optimizer, tensors: dict, names: dict) -> None:
    for group in opt.param_groups:
        for p in group["params"]:
            name = names[id(p)]
            slots = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.split("/", 1)[0] == name}
            if not slots:
                continue
            state = {}
            for slot, value in slots.items():
                if slot == "step":
                    state[slot] = value.to(torch.float32).reshape(())
                else:
                    state[slot] = value.to(p.dtype).reshape(p.shape)
            opt.state[p] = state


def parameter_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
