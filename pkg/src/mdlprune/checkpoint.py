"""Binary checkpoint container.

Layout (all integers little-endian, documented in docs/format.md):

    magic "MDLPCKPT" | u32 version | u32 flags | u32 manifest length |
    manifest JSON (canonical) | payload | u32 crc32 of everything before it

The manifest lists named entries sorted by name with dtype kind, shape, and
payload offset. Frozen switch vectors and pruned-model masks are bit-packed
(LSB-first, padded to a byte); all other numeric entries are raw little-endian
arrays. Save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from typing import Union

import numpy as np

from .autograd import RunningStats, Tensor
from .data import Dataset
from .model import MultiDomainNet, NetConfig, net_geometry
from .pruner import PrunedModel

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint",
           "save_datasets", "load_datasets", "MAGIC", "VERSION"]

MAGIC = b"MDLPCKPT"
VERSION = 1
FLAG_PRUNED = 0x1
FLAG_DATASET = 0x2

_KINDS = {"f32": np.float32, "f64": np.float64, "i64": np.int64}


class CheckpointError(Exception):
    """Raised for malformed, truncated, or corrupted checkpoint files."""


def _pack_bits(arr: np.ndarray) -> bytes:
    return np.packbits(arr.astype(np.uint8), bitorder="little").tobytes()


def _unpack_bits(raw: bytes, n: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    return bits[:n].astype(np.uint8)


def _encode(entries: dict) -> tuple[bytes, list[dict]]:
    manifest = []
    payload = bytearray()
    for name in sorted(entries):
        kind, value = entries[name]
        if kind == "json":
            raw = json.dumps(value, sort_keys=True,
                             separators=(",", ":")).encode("utf-8")
            shape = [len(raw)]
        elif kind == "bits":
            arr = np.asarray(value)
            raw = _pack_bits(arr)
            shape = list(arr.shape)
        else:
            arr = np.ascontiguousarray(np.asarray(value, dtype=_KINDS[kind]))
            raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
            shape = list(arr.shape)
        manifest.append({"name": name, "kind": kind, "shape": shape,
                         "offset": len(payload), "nbytes": len(raw)})
        payload.extend(raw)
    return bytes(payload), manifest


def write_container(path: str, entries: dict, flags: int = 0):
    payload, manifest = _encode(entries)
    mbytes = json.dumps({"entries": manifest}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    head = MAGIC + struct.pack("<III", VERSION, flags, len(mbytes))
    body = head + mbytes + payload
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", crc))


def read_container(path: str) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 16:
        raise CheckpointError(f"{path}: truncated file ({len(blob)} bytes)")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint file")
    version, flags, mlen = struct.unpack_from("<III", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    stored_crc = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointError(
            f"{path}: checksum failure (stored {stored_crc:08x}, "
            f"computed {actual_crc:08x})")
    mstart = len(MAGIC) + 12
    try:
        manifest = json.loads(blob[mstart:mstart + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from exc
    pstart = mstart + mlen
    payload = blob[pstart:len(blob) - 4]
    entries = {}
    for e in manifest["entries"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: payload truncated at {e['name']!r}")
        if e["kind"] == "json":
            entries[e["name"]] = ("json", json.loads(raw.decode("utf-8")))
        elif e["kind"] == "bits":
            n = int(np.prod(e["shape"]))
            entries[e["name"]] = ("bits", _unpack_bits(raw, n).reshape(e["shape"]))
        else:
            arr = np.frombuffer(raw, dtype=np.dtype(_KINDS[e["kind"]]).newbyteorder("<"))
            entries[e["name"]] = (e["kind"], arr.reshape(e["shape"]).copy())
    return entries, flags


def _bn_entries(entries: dict, prefix: str, gamma, beta, stats):
    for d, (grow, brow, srow) in enumerate(zip(gamma, beta, stats)):
        for c, (g, b, st) in enumerate(zip(grow, brow, srow)):
            entries[f"{prefix}/{d:02d}/{c:02d}/gamma"] = ("f32", g.data)
            entries[f"{prefix}/{d:02d}/{c:02d}/beta"] = ("f32", b.data)
            entries[f"{prefix}/{d:02d}/{c:02d}/mean"] = ("f32", st.mean)
            entries[f"{prefix}/{d:02d}/{c:02d}/var"] = ("f32", st.var)


def _bn_restore(entries: dict, prefix: str, num_domains: int, num_convs: int):
    gamma, beta, stats = [], [], []
    for d in range(num_domains):
        grow, brow, srow = [], [], []
        for c in range(num_convs):
            base = f"{prefix}/{d:02d}/{c:02d}"
            grow.append(Tensor(entries[base + "/gamma"][1], requires_grad=True))
            brow.append(Tensor(entries[base + "/beta"][1], requires_grad=True))
            st = RunningStats(len(entries[base + "/mean"][1]))
            st.mean[:] = entries[base + "/mean"][1]
            st.var[:] = entries[base + "/var"][1]
            srow.append(st)
        gamma.append(grow)
        beta.append(brow)
        stats.append(srow)
    return gamma, beta, stats


def save_checkpoint(model: Union[MultiDomainNet, PrunedModel], path: str,
                    meta: dict | None = None):
    """Serialize a trained or pruned model; ``meta`` rides along in the
    config entry (e.g. the domain specs needed to rebuild eval data)."""
    pruned = isinstance(model, PrunedModel)
    cfg = model.config
    entries: dict = {}
    config_blob = {
        "net": cfg.to_dict(),
        "pruned": pruned,
        "frozen": True if pruned else model.frozen,
        "meta": meta or {},
    }
    entries["config"] = ("json", config_blob)
    for i, k in enumerate(model.kernels):
        entries[f"kernel/{i:02d}"] = ("f32", k.data)
    _bn_entries(entries, "bn", model.bn_gamma, model.bn_beta, model.bn_stats)
    for d, (w, b) in enumerate(model.heads):
        entries[f"head/{d:02d}/w"] = ("f32", w.data)
        entries[f"head/{d:02d}/b"] = ("f32", b.data)
    if pruned:
        for c, table in enumerate(model.index_tables):
            entries[f"index/{c:02d}"] = ("i64", table)
        for d, row in enumerate(model.masks):
            for l, m in enumerate(row):
                entries[f"mask/{d:02d}/{l:02d}"] = ("bits", m)
        write_container(path, entries, FLAG_PRUNED)
        return
    for d, row in enumerate(model.switches):
        for l, s in enumerate(row):
            if model.frozen:
                entries[f"switch/{d:02d}/{l:02d}"] = ("bits",
                                                      (s.data > cfg.tau))
            else:
                entries[f"switch/{d:02d}/{l:02d}"] = ("f32", s.data)
    write_container(path, entries, 0)


def load_checkpoint(path: str) -> tuple[Union[MultiDomainNet, PrunedModel], dict]:
    """Rebuild a model from a container; returns (model, meta)."""
    entries, flags = read_container(path)
    if "config" not in entries:
        raise CheckpointError(f"{path}: missing config entry")
    blob = entries["config"][1]
    if flags & FLAG_DATASET:
        raise CheckpointError(f"{path}: dataset cache, not a model checkpoint")
    cfg = NetConfig.from_dict(blob["net"])
    geoms = [g for g in net_geometry(cfg) if g.kind == "conv"]
    try:
        kernels = [Tensor(entries[f"kernel/{i:02d}"][1])
                   for i in range(len(geoms))]
        bn_gamma, bn_beta, bn_stats = _bn_restore(entries, "bn",
                                                  cfg.num_domains, len(geoms))
        heads = [(Tensor(entries[f"head/{d:02d}/w"][1], requires_grad=True),
                  Tensor(entries[f"head/{d:02d}/b"][1], requires_grad=True))
                 for d in range(cfg.num_domains)]
        if blob["pruned"]:
            tables = [entries[f"index/{c:02d}"][1].astype(np.int64)
                      for c in range(len(geoms))]
            masked = [g for g in geoms if g.masked]
            masks = [[entries[f"mask/{d:02d}/{l:02d}"][1]
                      for l in range(len(masked))]
                     for d in range(cfg.num_domains)]
            return PrunedModel(cfg, kernels, tables, masks, bn_gamma, bn_beta,
                               bn_stats, heads), blob["meta"]
        masked = [g for g in geoms if g.masked]
        switches = []
        for d in range(cfg.num_domains):
            row = []
            for l in range(len(masked)):
                kind, val = entries[f"switch/{d:02d}/{l:02d}"]
                row.append(Tensor(val.astype(np.float32), requires_grad=True))
            switches.append(row)
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing entry {exc}") from exc
    net = MultiDomainNet(cfg, kernels, switches, bn_gamma, bn_beta, bn_stats,
                         heads, frozen=blob["frozen"])
    return net, blob["meta"]


def save_datasets(splits: dict[str, Dataset], path: str, spec_dict: dict):
    """Cache a generated domain (all splits) in the container format."""
    entries: dict = {"config": ("json", {"dataset": True, "spec": spec_dict,
                                         "splits": sorted(splits)})}
    for split, ds in splits.items():
        entries[f"data/{split}/images"] = ("f32", ds.images)
        entries[f"data/{split}/labels"] = ("i64", ds.labels)
        entries[f"data/{split}/indices"] = ("i64", ds.indices)
    write_container(path, entries, FLAG_DATASET)


def load_datasets(path: str) -> tuple[dict[str, Dataset], dict]:
    entries, flags = read_container(path)
    if not flags & FLAG_DATASET:
        raise CheckpointError(f"{path}: not a dataset cache")
    blob = entries["config"][1]
    spec = blob["spec"]
    splits = {}
    for split in blob["splits"]:
        splits[split] = Dataset(
            images=entries[f"data/{split}/images"][1],
            labels=entries[f"data/{split}/labels"][1],
            split=split,
            indices=entries[f"data/{split}/indices"][1],
            classes=spec["classes"],
            mirror=spec.get("mirror", True),
            crop=spec.get("crop", True))
    return splits, spec
