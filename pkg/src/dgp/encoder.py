"""Graph isomorphism network encoder with edge-weighted message passing.

Each layer computes MLP_l((1 + eps_l) * a_i + sum over incoming edges
(j -> i) of w_ji * a_j), starting from the node features.  The per-layer
outputs are concatenated per node, pooled over nodes, and passed through
a two-layer projection head to give the graph embedding.  With all edge
weights at 1 this reduces to the ordinary unweighted encoder.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graphs import Graph

FORMAT_MAGIC = b"DGPCKPT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is malformed or incompatible."""


@dataclass
class NodeReps:
    """Per-layer node representation matrices and their column-wise concat."""

    per_layer: list
    concat: "ad.Tensor"


class GinEncoder:
    """Encoder parameters plus architecture metadata."""

    def __init__(self, params, feature_dim, hidden_dims, proj_hidden, embed_dim,
                 readout_mode="sum", pretrain_info=None):
        self.params = params
        self.feature_dim = feature_dim
        self.hidden_dims = tuple(hidden_dims)
        self.proj_hidden = proj_hidden
        self.embed_dim = embed_dim
        self.readout_mode = readout_mode
        self.pretrain_info = pretrain_info

    @property
    def concat_dim(self) -> int:
        return sum(self.hidden_dims)

    @property
    def frozen(self) -> bool:
        return self.params.all_frozen

    @classmethod
    def build(cls, feature_dim, hidden_dims=(32, 32, 32), proj_hidden=96,
              embed_dim=96, readout_mode="sum", rng=None):
        """Fresh encoder: Glorot-uniform weights, zero biases, eps at 0."""
        if readout_mode not in ("sum", "mean"):
            raise ValueError(f"unknown readout mode {readout_mode!r}")
        rng = rng or np.random.default_rng(0)
        ps = ad.ParamSet()
        in_dim = feature_dim
        for l, out_dim in enumerate(hidden_dims):
            ps.add(f"gin{l}.eps", 0.0)
            ps.add(f"gin{l}.w1", ad.glorot_uniform(rng, in_dim, out_dim))
            ps.add(f"gin{l}.b1", np.zeros(out_dim))
            ps.add(f"gin{l}.w2", ad.glorot_uniform(rng, out_dim, out_dim))
            ps.add(f"gin{l}.b2", np.zeros(out_dim))
            in_dim = out_dim
        concat = sum(hidden_dims)
        ps.add("proj.w1", ad.glorot_uniform(rng, concat, proj_hidden))
        ps.add("proj.b1", np.zeros(proj_hidden))
        ps.add("proj.w2", ad.glorot_uniform(rng, proj_hidden, embed_dim))
        ps.add("proj.b2", np.zeros(embed_dim))
        return cls(ps, feature_dim, hidden_dims, proj_hidden, embed_dim, readout_mode)


def _weight_tensor(g: Graph, weights):
    if weights is None:
        return ad.constant(np.ones(g.edge_count))
    values = getattr(weights, "values", weights)
    if isinstance(values, ad.Tensor):
        t = values
    else:
        t = ad.constant(np.asarray(values, dtype=np.float64))
    if t.data.shape != (g.edge_count,):
        raise ValueError(
            f"need one weight per edge: {t.data.shape} vs {g.edge_count} edges"
        )
    return t


def _mlp2(x, ps, w1, b1, w2, b2):
    h = ad.relu(ad.add(ad.matmul(x, ps.tensor(w1)), ps.tensor(b1)))
    return ad.add(ad.matmul(h, ps.tensor(w2)), ps.tensor(b2))


def encode_nodes(g: Graph, weights, enc: GinEncoder) -> NodeReps:
    """Run the message-passing layers; weights may be None (all ones), an
    array, an EdgeWeights, or a Tensor carrying gradients."""
    if g.features.shape[1] != enc.feature_dim:
        raise ValueError(
            f"graph feature width {g.features.shape[1]} does not match "
            f"encoder feature_dim {enc.feature_dim}"
        )
    w = _weight_tensor(g, weights)
    src = g.edges[:, 0]
    dst = g.edges[:, 1]
    h = ad.constant(g.features)
    per_layer = []
    for l in range(len(enc.hidden_dims)):
        msg = ad.weighted_neighbor_sum(h, src, dst, w, g.node_count)
        eps = enc.params.tensor(f"gin{l}.eps")
        pre = ad.add(ad.mul(h, ad.add(eps, 1.0)), msg)
        h = _mlp2(pre, enc.params, f"gin{l}.w1", f"gin{l}.b1", f"gin{l}.w2", f"gin{l}.b2")
        per_layer.append(h)
    return NodeReps(per_layer, ad.concat_rows(per_layer))


def readout(reps: NodeReps, mode="sum"):
    """Pool the concatenated node representations over nodes."""
    if reps.concat.data.shape[0] == 0:
        raise ValueError("cannot pool a graph with zero nodes")
    if mode == "sum":
        return ad.sum_rows(reps.concat)
    if mode == "mean":
        return ad.mean_rows(reps.concat)
    raise ValueError(f"unknown readout mode {mode!r}")


def project(pooled, enc: GinEncoder):
    return _mlp2(pooled, enc.params, "proj.w1", "proj.b1", "proj.w2", "proj.b2")


def encode_graph(g: Graph, weights, enc: GinEncoder):
    """Graph embedding: project(readout(encode_nodes(g, w)))."""
    return project(readout(encode_nodes(g, weights, enc), enc.readout_mode), enc)


def freeze(enc: GinEncoder):
    enc.params.freeze_all()
    return enc


# -- checkpoint container ---------------------------------------------------
#
# Layout: 8-byte magic, 4-byte little-endian JSON length, the UTF-8 JSON
# metadata, then each tensor's raw little-endian float64 bytes in the order
# given by the metadata manifest.


def write_container(meta: dict, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    meta = dict(meta)
    meta["format_version"] = FORMAT_VERSION
    meta["tensors"] = [[name, list(arr.shape)] for name, arr in tensors]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(FORMAT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for _, arr in tensors:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def read_container(data: bytes) -> tuple[dict, dict]:
    """Return (metadata, {tensor name: array}); validates magic, version,
    and that the payload holds exactly the bytes the manifest promises."""
    if data[: len(FORMAT_MAGIC)] != FORMAT_MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint file")
    pos = len(FORMAT_MAGIC)
    if len(data) < pos + 4:
        raise CheckpointError("truncated checkpoint: missing metadata length")
    (meta_len,) = struct.unpack("<I", data[pos : pos + 4])
    pos += 4
    if len(data) < pos + meta_len:
        raise CheckpointError("truncated checkpoint: metadata cut short")
    try:
        meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint metadata: {e}") from None
    pos += meta_len
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {meta.get('format_version')}")
    tensors = {}
    for name, shape in meta["tensors"]:
        size = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if len(data) < pos + size:
            raise CheckpointError(f"truncated checkpoint: tensor {name!r} cut short")
        arr = np.frombuffer(data[pos : pos + size], dtype="<f8").astype(np.float64)
        tensors[name] = arr.reshape(shape)
        pos += size
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after final tensor")
    return meta, tensors


def encoder_to_bytes(enc: GinEncoder) -> bytes:
    meta = {
        "kind": "encoder",
        "feature_dim": enc.feature_dim,
        "hidden_dims": list(enc.hidden_dims),
        "proj_hidden": enc.proj_hidden,
        "embed_dim": enc.embed_dim,
        "readout": enc.readout_mode,
        "pretrain": enc.pretrain_info,
    }
    tensors = [(p.name, p.value) for p in enc.params]
    return write_container(meta, tensors)


def encoder_from_bytes(data: bytes, expect_feature_dim=None) -> GinEncoder:
    meta, tensors = read_container(data)
    if meta.get("kind") != "encoder":
        raise CheckpointError(f"expected an encoder checkpoint, got kind {meta.get('kind')!r}")
    if expect_feature_dim is not None and meta["feature_dim"] != expect_feature_dim:
        raise CheckpointError(
            f"encoder was built for feature_dim {meta['feature_dim']}, "
            f"data has {expect_feature_dim}"
        )
    ps = ad.ParamSet()
    for name, _ in meta["tensors"]:
        ps.add(name, tensors[name])
    return GinEncoder(
        ps,
        meta["feature_dim"],
        meta["hidden_dims"],
        meta["proj_hidden"],
        meta["embed_dim"],
        readout_mode=meta["readout"],
        pretrain_info=meta.get("pretrain"),
    )


def save_checkpoint(enc: GinEncoder, path: str):
    with open(path, "wb") as fh:
        fh.write(encoder_to_bytes(enc))


def load_checkpoint(path: str, expect_feature_dim=None) -> GinEncoder:
    with open(path, "rb") as fh:
        return encoder_from_bytes(fh.read(), expect_feature_dim=expect_feature_dim)


def encoder_hash(enc: GinEncoder) -> str:
    """sha256 of the serialized encoder; stable while its params are."""
    return hashlib.sha256(encoder_to_bytes(enc)).hexdigest()
