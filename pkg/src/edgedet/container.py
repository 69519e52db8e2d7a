"""The .edm model container.

Layout: 4-byte magic ``EDM1``, little-endian u32 header length, UTF-8 JSON
header, then weight blobs, each 16-byte aligned, little-endian element order.
The header describes metadata, tensor specs (with quant params), nodes, and
(offset, nbytes) pairs for every blob.  Per-channel scale arrays and requant
tables are stored as blobs like weights.
"""

from __future__ import annotations

import json

import numpy as np

from .ir import DTYPE_NUMPY, Graph, GraphError, Node, QuantParams, TensorSpec

MAGIC = b"EDM1"
ALIGN = 16

_BLOB_DTYPES = {"float32": np.float32, "float64": np.float64,
                "int8": np.int8, "int32": np.int32, "int64": np.int64}


class ContainerError(ValueError):
    pass


def _quant_to_json(qp: QuantParams | None, blobs: "_BlobTable"):
    if qp is None:
        return None
    scale = qp.scale
    if isinstance(scale, np.ndarray):
        scale = {"blob": blobs.add(scale.astype(np.float64))}
    else:
        scale = float(scale)
    return {"scheme": qp.scheme, "scale": scale, "zero_point": int(qp.zero_point)}


def _quant_from_json(d, blobs):
    if d is None:
        return None
    scale = d["scale"]
    if isinstance(scale, dict):
        scale = blobs[scale["blob"]]
    return QuantParams(d["scheme"], scale, d["zero_point"])


class _BlobTable:
    def __init__(self):
        self.arrays: list[np.ndarray] = []

    def add(self, a: np.ndarray) -> int:
        self.arrays.append(np.ascontiguousarray(a))
        return len(self.arrays) - 1


def _attrs_to_json(attrs: dict, blobs: _BlobTable) -> dict:
    out = {}
    for k in sorted(attrs):
        v = attrs[k]
        if isinstance(v, np.ndarray):
            out[k] = {"blob": blobs.add(v)}
        else:
            out[k] = v
    return out


def _attrs_from_json(attrs: dict, blobs) -> dict:
    out = {}
    for k, v in attrs.items():
        if isinstance(v, dict) and set(v) == {"blob"}:
            out[k] = blobs[v["blob"]]
        elif k == "requant":
            out[k] = [tuple(pair) for pair in v]
        else:
            out[k] = v
    return out


def header_dict(g: Graph, blobs: _BlobTable) -> dict:
    tensors = [
        {"id": t.id, "dtype": t.dtype,
         "shape": list(t.shape) if t.shape is not None else None,
         "quant": _quant_to_json(t.quant, blobs)}
        for t in sorted(g.tensors.values(), key=lambda t: t.id)
    ]
    nodes = []
    for n in g.nodes:
        nodes.append({
            "kind": n.kind, "name": n.name, "region": n.region,
            "inputs": n.inputs, "outputs": n.outputs,
            "attrs": _attrs_to_json(n.attrs, blobs),
            "weights": {k: {"blob": blobs.add(n.weights[k]),
                            "dtype": str(n.weights[k].dtype),
                            "shape": list(n.weights[k].shape)}
                        for k in sorted(n.weights)},
        })
    return {"format": 1, "metadata": g.metadata, "input_id": g.input_id,
            "output_ids": g.output_ids, "tensors": tensors, "nodes": nodes}


def _layout(g: Graph):
    """Fixpoint of header length vs blob offsets (offsets live in the JSON)."""
    blobs = _BlobTable()
    head = header_dict(g, blobs)
    sizes = [a.nbytes for a in blobs.arrays]
    entries = [{"offset": 0, "nbytes": s} for s in sizes]
    head["blobs"] = entries
    base = 0
    for _ in range(8):
        header_bytes = json.dumps(head, sort_keys=True).encode()
        new_base = len(MAGIC) + 4 + len(header_bytes)
        off = _pad_to(new_base)
        for e in entries:
            e["offset"] = off
            off = _pad_to(off + e["nbytes"])
        if new_base == base:
            break
        base = new_base
    else:  # pragma: no cover
        raise ContainerError("header layout did not converge")
    return header_bytes, entries, blobs


def serialize(g: Graph) -> bytes:
    header_bytes, entries, blobs = _layout(g)
    out = bytearray()
    out += MAGIC
    out += int(len(header_bytes)).to_bytes(4, "little")
    out += header_bytes
    for e, a in zip(entries, blobs.arrays):
        out += b"\0" * (e["offset"] - len(out))
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        out += le.tobytes()
    return bytes(out)


def _pad_to(n: int, align: int = ALIGN) -> int:
    return ((n + align - 1) // align) * align


def deserialize(data: bytes) -> Graph:
    if data[:4] != MAGIC:
        raise ContainerError(
            f"bad magic at byte 0: {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 8:
        raise ContainerError(f"truncated container at byte {len(data)}")
    hlen = int(np.frombuffer(data[4:8], dtype="<u4")[0])
    if 8 + hlen > len(data):
        raise ContainerError(f"truncated header at byte {len(data)}")
    head = json.loads(data[8:8 + hlen].decode())
    arrays = []
    for i, e in enumerate(head["blobs"]):
        if e["offset"] + e["nbytes"] > len(data):
            raise ContainerError(f"blob {i} truncated at byte {e['offset']}")
        arrays.append(data[e["offset"]:e["offset"] + e["nbytes"]])

    def load_blob(idx, dtype, shape):
        a = np.frombuffer(arrays[idx], dtype=np.dtype(dtype).newbyteorder("<"))
        return a.reshape(shape).astype(dtype)

    raw_blobs = {}  # index -> 1-D float64 view for quant scales / attr arrays

    def load_raw(idx):
        if idx not in raw_blobs:
            raw_blobs[idx] = np.frombuffer(arrays[idx], dtype="<f8").astype(np.float64)
        return raw_blobs[idx]

    class _RawView:
        def __getitem__(self, idx):
            return load_raw(idx)

    tensors = {}
    for td in head["tensors"]:
        tensors[td["id"]] = TensorSpec(
            id=td["id"], dtype=td["dtype"],
            shape=tuple(td["shape"]) if td["shape"] else None,
            quant=_quant_from_json(td["quant"], _RawView()))
    nodes = []
    for nd in head["nodes"]:
        weights = {k: load_blob(w["blob"], w["dtype"], w["shape"])
                   for k, w in nd["weights"].items()}
        nodes.append(Node(kind=nd["kind"], inputs=list(nd["inputs"]),
                          outputs=list(nd["outputs"]),
                          attrs=_attrs_from_json(nd["attrs"], _RawView()),
                          weights=weights, region=nd["region"], name=nd["name"]))
    return Graph(nodes=nodes, tensors=tensors, input_id=head["input_id"],
                 output_ids=list(head["output_ids"]), metadata=head["metadata"])


def save_graph(g: Graph, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize(g))


def load_graph(path) -> Graph:
    with open(path, "rb") as f:
        return deserialize(f.read())


def header_size(g: Graph) -> int:
    """Bytes of magic + length word + JSON header for FLASH estimation."""
    header_bytes, _, _ = _layout(g)
    return len(MAGIC) + 4 + len(header_bytes)
