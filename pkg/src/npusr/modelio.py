"""Model files: a JSON manifest ``<name>.json`` next to a raw blob ``<name>.bin``.

See ``docs/model_format.md`` for the field-by-field description.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import graph as G
from .errors import ManifestFormatError, OffsetOverflowError, VersionMismatchError
from .graph import Graph, OpNode
from .ops import Activation, ConvSpec

FORMAT = "npusr-model"
VERSION = 1


def model_paths(path) -> tuple[Path, Path]:
    """``foo``, ``foo.json`` or ``foo.bin`` -> (``foo.json``, ``foo.bin``)."""
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


class BlobWriter:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.offset = 0

    def put(self, arr: np.ndarray, dtype: str) -> dict:
        data = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()
        ref = {"offset": self.offset, "length": len(data)}
        self.chunks.append(data)
        self.offset += len(data)
        return ref

    def getvalue(self) -> bytes:
        return b"".join(self.chunks)


class BlobReader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.spans: list[tuple[int, int, str]] = []

    def get(self, ref: dict, dtype: str, shape: tuple, what: str) -> np.ndarray:
        try:
            off, length = int(ref["offset"]), int(ref["length"])
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestFormatError(f"{what}: malformed blob reference {ref!r}") from e
        dt = np.dtype(dtype).newbyteorder("<")
        want = int(np.prod(shape)) * dt.itemsize
        if length != want:
            raise ManifestFormatError(
                f"{what}: declared length {length} bytes, shape {shape} needs {want}"
            )
        if off < 0 or off + length > len(self.blob):
            raise OffsetOverflowError(
                f"{what}: bytes [{off}, {off + length}) outside blob of {len(self.blob)} bytes"
            )
        for o, n, name in self.spans:
            if off < o + n and o < off + length:
                raise ManifestFormatError(f"{what}: blob span overlaps {name}")
        self.spans.append((off, length, what))
        return np.frombuffer(self.blob, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape)


def node_header(n: OpNode) -> dict:
    d = {"id": n.id, "op": n.op, "inputs": list(n.inputs)}
    if n.op == "conv2d":
        s = n.spec
        d.update(kernel=s.kernel, in_channels=s.in_channels, out_channels=s.out_channels,
                 activation=s.activation.to_dict())
    elif n.op == "add":
        d["activation"] = n.activation.to_dict()
    elif n.op == "clip":
        d.update(lo=n.lo, hi=n.hi)
    elif n.op == "depth_to_space":
        d["block"] = n.block
    elif n.op == "input_repeat":
        d["times"] = n.times
    return d


def conv_shape(d: dict) -> tuple[int, int, int, int]:
    return (int(d["out_channels"]), int(d["kernel"]), int(d["kernel"]), int(d["in_channels"]))


def node_from_header(d: dict, spec: ConvSpec | None = None) -> OpNode:
    op = d["op"]
    kw = {}
    if op == "conv2d":
        kw["spec"] = spec
    elif op == "add":
        kw["activation"] = Activation.from_dict(d.get("activation", {"kind": "none"}))
    elif op == "clip":
        kw.update(lo=float(d["lo"]), hi=float(d["hi"]))
    elif op == "depth_to_space":
        kw["block"] = int(d["block"])
    elif op == "input_repeat":
        kw["times"] = int(d["times"])
    return OpNode(str(d["id"]), op, tuple(d["inputs"]), **kw)


def graph_header(g: Graph) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "scale": g.scale,
        "input": {"id": g.input_id, "channels": g.in_channels},
        "output": g.output_id,
    }


def write_pair(path, manifest: dict, blob: bytes) -> Path:
    jpath, bpath = model_paths(path)
    jpath.parent.mkdir(parents=True, exist_ok=True)
    manifest["blob"] = bpath.name
    manifest["blob_bytes"] = len(blob)
    bpath.write_bytes(blob)
    jpath.write_text(json.dumps(manifest, indent=2) + "\n")
    return jpath


def read_pair(path) -> tuple[dict, bytes]:
    jpath, bpath = model_paths(path)
    try:
        manifest = json.loads(jpath.read_text())
    except json.JSONDecodeError as e:
        raise ManifestFormatError(f"{jpath}: invalid JSON ({e})") from e
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise ManifestFormatError(f"{jpath}: not an {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise VersionMismatchError(
            f"{jpath}: manifest version {manifest.get('version')!r}, this reader supports {VERSION}"
        )
    blob_name = manifest.get("blob", bpath.name)
    blob = (jpath.parent / blob_name).read_bytes()
    return manifest, blob


def save_model(g: Graph, path) -> Path:
    """Write ``g`` as ``<path>.json`` + ``<path>.bin``; returns the manifest path."""
    G.validate(g)
    w = BlobWriter()
    nodes = []
    for n in g.nodes:
        d = node_header(n)
        if n.op == "conv2d":
            d["weights"] = w.put(n.spec.weights, "f4")
            d["bias"] = w.put(n.spec.bias, "f4")
        nodes.append(d)
    manifest = graph_header(g)
    manifest["dtype"] = "float32"
    manifest["nodes"] = nodes
    return write_pair(path, manifest, w.getvalue())


def graph_from_manifest(manifest: dict, nodes: list[OpNode]) -> Graph:
    inp = manifest.get("input", {})
    return Graph(
        tuple(nodes),
        str(manifest["output"]),
        input_id=str(inp.get("id", "input")),
        scale=int(manifest["scale"]),
        in_channels=int(inp.get("channels", 3)),
    )


def load_model(path) -> Graph:
    manifest, blob = read_pair(path)
    if manifest.get("quantized"):
        raise ManifestFormatError("manifest describes a quantized model; use quant.load_quantized")
    r = BlobReader(blob)
    try:
        nodes = []
        for d in manifest["nodes"]:
            spec = None
            if d["op"] == "conv2d":
                shape = conv_shape(d)
                spec = ConvSpec(
                    r.get(d["weights"], "f4", shape, f"{d['id']}.weights"),
                    r.get(d["bias"], "f4", (shape[0],), f"{d['id']}.bias"),
                    Activation.from_dict(d.get("activation", {"kind": "none"})),
                )
            nodes.append(node_from_header(d, spec))
        g = graph_from_manifest(manifest, nodes)
    except (KeyError, TypeError) as e:
        raise ManifestFormatError(f"missing or malformed manifest field: {e}") from e
    G.validate(g)
    return g
