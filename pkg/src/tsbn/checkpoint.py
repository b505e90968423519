"""Binary checkpoint container.

Layout::

    b"TSBNCKPT"                      magic
    uint64 LE                        header length in bytes
    header                           UTF-8 JSON (layer spec, task table, label map, tensor index)
    payload                          little-endian float32 tensors, in header order

Every float that defines model behaviour (conv kernels, gamma/beta, running
statistics, heads) is stored, so a round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import Backbone, BNBank, IncrementalModel, LabelMap, TaskHead
from .nn import BatchNormState, Parameter

MAGIC = b"TSBNCKPT"
VERSION = 1


class CheckpointError(IOError):
    pass


def _bank_entries(prefix, bank: BNBank):
    for k, s in enumerate(bank.states):
        yield f"{prefix}.{k}.gamma", s.gamma.value, s.gamma.trainable
        yield f"{prefix}.{k}.beta", s.beta.value, s.beta.trainable
        yield f"{prefix}.{k}.running_mean", s.running_mean, None
        yield f"{prefix}.{k}.running_var", s.running_var, None


def save_checkpoint(model: IncrementalModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    tensors = []
    for i, p in enumerate(model.backbone.conv_params):
        tensors.append((f"conv.{i}", p.value, p.trainable))
    tensors += _bank_entries("template", model.template)
    banks = []
    for t, bank in enumerate(model.banks):
        if bank is model.template:
            banks.append({"task_id": t, "ref": "template"})
        else:
            banks.append({"task_id": bank.task_id, "ref": f"bank.{t}",
                          "bn": [[s.eps, s.momentum] for s in bank.states]})
            tensors += _bank_entries(f"bank.{t}", bank)
    heads = []
    for t, h in enumerate(model.heads):
        heads.append({"task_id": h.task_id, "known_classes": h.known_classes, "has_unknown": h.has_unknown})
        tensors.append((f"head.{t}.weight", h.weight.value, h.weight.trainable))
        tensors.append((f"head.{t}.bias", h.bias.value, h.bias.trainable))

    header = {
        "format": "tsbn-checkpoint",
        "version": VERSION,
        "backbone": {"layer_spec": [list(x) for x in model.backbone.layer_spec],
                     "in_channels": model.backbone.in_channels,
                     "seed": model.backbone.seed,
                     "frozen": model.backbone.frozen},
        "model": {"bn_init": model.bn_init, "shared_bn": model.shared_bn,
                  "unknown_class": model.unknown_class, "seed": model.seed},
        "template_bn": [[s.eps, s.momentum] for s in model.template.states],
        "banks": banks,
        "heads": heads,
        "label_map": model.label_map.task_classes,
        "tensors": [{"name": n, "shape": list(v.shape), "trainable": tr} for n, v, tr in tensors],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, v, _ in tensors:
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[IncrementalModel, dict]:
    """Load a checkpoint, returning the model and the ``extra`` payload."""
    path = Path(path)
    try:
        return _read(path)
    except (KeyError, TypeError, IndexError) as exc:
        raise CheckpointError(f"{path}: malformed header field {exc}") from exc


def _read(path: Path):
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    if len(raw) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(raw) < start + hlen:
        raise CheckpointError(f"{path}: truncated inside header ({len(raw) - start} of {hlen} bytes)")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header is not valid JSON: {exc}") from exc
    if header.get("format") != "tsbn-checkpoint" or header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported format/version")

    arrays = {}
    trainable = {}
    off = start + hlen
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: payload truncated in tensor {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=off) \
            .reshape(shape).astype(np.float32)
        trainable[entry["name"]] = entry["trainable"]
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes after payload")

    def take(name):
        try:
            return arrays[name]
        except KeyError:
            raise CheckpointError(f"{path}: missing tensor {name!r}") from None

    bb = header["backbone"]
    backbone = Backbone([tuple(x) for x in bb["layer_spec"]], bb["in_channels"], bb["seed"])
    for i, p in enumerate(backbone.conv_params):
        v = take(f"conv.{i}")
        if v.shape != p.value.shape:
            raise CheckpointError(f"{path}: tensor 'conv.{i}' has shape {v.shape}, expected {p.value.shape}")
        p.value = v
        p.grad = np.zeros_like(v)
        p.trainable = trainable[f"conv.{i}"]
    backbone.frozen = bb["frozen"]

    def load_bank(prefix, task_id, bn):
        states = []
        for k, (eps, mom) in enumerate(bn):
            states.append(BatchNormState(
                Parameter(take(f"{prefix}.{k}.gamma"), trainable[f"{prefix}.{k}.gamma"]),
                Parameter(take(f"{prefix}.{k}.beta"), trainable[f"{prefix}.{k}.beta"]),
                take(f"{prefix}.{k}.running_mean"), take(f"{prefix}.{k}.running_var"), eps, mom))
        bank = BNBank(task_id, states)
        try:
            bank.check_layout(backbone.bn_channels)
        except ValueError as exc:
            raise CheckpointError(f"{path}: {prefix}: {exc}") from exc
        return bank

    m = header["model"]
    template = load_bank("template", -1, header["template_bn"])
    model = IncrementalModel(backbone, template, bn_init=m["bn_init"], shared_bn=m["shared_bn"],
                             unknown_class=m["unknown_class"], seed=m["seed"])
    model.label_map = LabelMap([list(g) for g in header["label_map"]])
    for b in header["banks"]:
        if b["ref"] == "template":
            model.banks.append(model.template)
        else:
            model.banks.append(load_bank(b["ref"], b["task_id"], b["bn"]))
    for t, h in enumerate(header["heads"]):
        w, bias = f"head.{t}.weight", f"head.{t}.bias"
        model.heads.append(TaskHead(h["task_id"], h["known_classes"],
                                    Parameter(take(w), trainable[w], decay=True),
                                    Parameter(take(bias), trainable[bias]),
                                    h["has_unknown"]))
    if not (len(model.banks) == len(model.heads) == len(model.label_map.task_classes)):
        raise CheckpointError(f"{path}: task table is inconsistent")
    return model, header["extra"]


def load_checkpoint(path) -> IncrementalModel:
    return read_checkpoint(path)[0]
