"""Self-describing model archive.

Layout of a ``.dga`` file::

    DEEPGP-ARCHIVE <format version>\\n
    <header byte length>\\n
    <header: UTF-8 JSON, sorted keys>\\n
    <payload: little-endian float64 values>

The header lists every payload array with its offset (in values) and shape,
so the file can be inspected with a text editor up to the payload.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .bound import DeepModel, GroupMapping, LayerState
from .kernels import ArdKernel
from .training import ParameterLayout
from .variational import DiagonalGaussianField

FORMAT_VERSION = 1
MAGIC = b"DEEPGP-ARCHIVE"
_DTYPE = np.dtype("<f8")


class ArchiveError(ValueError):
    pass


class ArchiveVersionError(ArchiveError):
    """The archive was written by an incompatible format version."""


def model_structure(model: DeepModel) -> dict:
    layers = []
    for layer in model.layers:
        layers.append(
            {
                "groups": [
                    {"columns": g.columns.tolist(), "num_inducing": g.num_inducing} for g in layer.groups
                ],
                "input_dim": layer.input_dim,
                "output_dim": layer.output_dim,
            }
        )
    return {"num_data": model.num_data, "data_dim": model.data.shape[1], "layers": layers}


def template_model(structure: dict, data) -> DeepModel:
    """Placeholder model with the right shapes, used to unpack a parameter vector."""
    N = structure["num_data"]
    layers = []
    for h, spec in enumerate(structure["layers"]):
        Q = spec["input_dim"]
        groups = [
            GroupMapping(g["columns"], ArdKernel(1.0, np.ones(Q)), np.zeros((g["num_inducing"], Q)), 1.0)
            for g in spec["groups"]
        ]
        q = None
        if h > 0:
            q = DiagonalGaussianField(np.zeros((N, spec["output_dim"])), np.ones((N, spec["output_dim"])))
        layers.append(LayerState(groups, q))
    top = structure["layers"][-1]["input_dim"]
    return DeepModel(data, layers, DiagonalGaussianField(np.zeros((N, top)), np.ones((N, top))))


@dataclass
class ModelArchive:
    config: dict
    structure: dict
    layout: list
    params: np.ndarray
    report: dict
    provenance: dict
    arrays: dict = field(default_factory=dict)     # extra named float arrays (data, offsets, ...)
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: DeepModel, config: dict, report, provenance: dict, arrays=None):
        layout = ParameterLayout.from_model(model)
        arrs = {"data": model.data}
        arrs.update(arrays or {})
        prov = {"build": f"deepgp {__version__}"}
        prov.update(provenance)
        return cls(
            config=config,
            structure=model_structure(model),
            layout=layout.to_json(),
            params=layout.pack(model),
            report=report.as_dict() if hasattr(report, "as_dict") else dict(report),
            provenance=prov,
            arrays={k: np.asarray(v, dtype=float) for k, v in arrs.items()},
        )

    def model(self) -> DeepModel:
        template = template_model(self.structure, self.arrays["data"])
        layout = ParameterLayout.from_model(template)
        if layout.to_json() != self.layout:
            raise ArchiveError("parameter layout in archive does not match its structure")
        return layout.unpack(self.params, template)

    # -- serialisation -----------------------------------------------------

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name in ["params"] + sorted(self.arrays):
            arr = self.params if name == "params" else self.arrays[name]
            arr = np.ascontiguousarray(arr, dtype=_DTYPE)
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.size
        header = {
            "format_version": self.format_version,
            "config": self.config,
            "structure": self.structure,
            "layout": self.layout,
            "report": self.report,
            "provenance": self.provenance,
            "payload": {"dtype": "<f8", "arrays": entries, "count": offset},
        }
        text = json.dumps(header, sort_keys=True, allow_nan=True).encode("utf-8")
        head = MAGIC + b" " + str(self.format_version).encode() + b"\n" + str(len(text)).encode() + b"\n"
        return head + text + b"\n" + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelArchive":
        try:
            first, rest = blob.split(b"\n", 1)
            magic, version = first.split(b" ")
        except ValueError as exc:
            raise ArchiveError("not a deep GP archive (bad first line)") from exc
        if magic != MAGIC:
            raise ArchiveError("not a deep GP archive (bad magic)")
        version = int(version)
        if version != FORMAT_VERSION:
            raise ArchiveVersionError(
                f"archive format version {version} cannot be read by this build "
                f"(expects {FORMAT_VERSION}); no migration is available"
            )
        length_line, rest = rest.split(b"\n", 1)
        n = int(length_line)
        header = json.loads(rest[:n].decode("utf-8"))
        if rest[n:n + 1] != b"\n":
            raise ArchiveError("corrupt archive header terminator")
        payload = np.frombuffer(rest[n + 1:], dtype=_DTYPE)
        if payload.size != header["payload"]["count"]:
            raise ArchiveError(
                f"payload holds {payload.size} values, header declares {header['payload']['count']}"
            )
        arrays = {}
        for e in header["payload"]["arrays"]:
            size = int(np.prod(e["shape"])) if e["shape"] else 1
            arrays[e["name"]] = payload[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(float)
        params = arrays.pop("params")
        return cls(
            config=header["config"],
            structure=header["structure"],
            layout=header["layout"],
            params=params,
            report=header["report"],
            provenance=header["provenance"],
            arrays=arrays,
            format_version=version,
        )

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelArchive":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
