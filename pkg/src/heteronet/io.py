"""File formats: system manifests, trajectory CSVs, run manifests, atomic writes."""
from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import __version__
from .digraph import Digraph, serialize_digraph, parse_digraph
from .realize import (
    RealizationParams,
    RealizedSystem,
    absorbing_annulus,
    known_equilibria,
)

SCHEMA_VERSION = 1


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_files_atomic(files: dict[Path, bytes]) -> None:
    """Write every file to a temporary sibling first, then rename all of them."""
    staged = []
    try:
        for path, data in files.items():
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
            staged.append((tmp, path))
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, path in staged:
        os.replace(tmp, path)


def run_hash(payload: dict) -> str:
    return sha256_bytes(json.dumps(payload, sort_keys=True).encode())[:16]


def system_to_manifest(sys: RealizedSystem, source: Optional[str] = None) -> dict:
    r0, r1 = absorbing_annulus(sys)
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "system",
        "tool_version": __version__,
        "graph": json.loads(serialize_digraph(sys.graph)),
        "graph_source": source,
        "params": {"epsilon": sys.params.epsilon, "eta": sys.params.eta},
        "gate": sys.gate.to_dict(),
        "forced": sys.forced,
        "status": "verified" if sys.verified else "unverified",
        "annulus": {"R0": r0, "R1": r1},
        "equilibria": [eq.to_dict(sys) for eq in known_equilibria(sys)],
    }


def system_from_manifest(doc: dict) -> RealizedSystem:
    if doc.get("kind") != "system":
        raise ValueError("not a system manifest")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {doc.get('schema_version')}")
    graph = parse_digraph(json.dumps(doc["graph"]))
    params = RealizationParams(**doc["params"])
    return RealizedSystem(graph, params, forced=bool(doc.get("forced", False)))


def load_system(path) -> RealizedSystem:
    with open(path, encoding="utf-8") as fh:
        return system_from_manifest(json.load(fh))


def states_csv(times: np.ndarray, states: np.ndarray, tag: Optional[str] = None) -> bytes:
    """``t,x1,...,xn`` rows at full double precision, optional leading ``# run_hash`` comment."""
    n = states.shape[1] if states.ndim == 2 else 0
    buf = io.StringIO()
    if tag:
        buf.write(f"# run_hash: {tag}\n")
    buf.write(",".join(["t"] + [f"x{i + 1}" for i in range(n)]) + "\n")
    if len(times):
        np.savetxt(buf, np.column_stack([times, states]), delimiter=",", fmt="%.17g")
    return buf.getvalue().encode()


def read_states_csv(path) -> tuple[np.ndarray, np.ndarray]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    width = len(lines[0].split(","))
    body = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]]).reshape(-1, width)
    return body[:, 0], body[:, 1:]


def matrix_csv(labels: Iterable[str], matrix: np.ndarray, tag: Optional[str] = None) -> bytes:
    labels = list(labels)
    buf = io.StringIO()
    if tag:
        buf.write(f"# run_hash: {tag}\n")
    buf.write(",".join(["from"] + labels) + "\n")
    for lab, row in zip(labels, matrix):
        buf.write(",".join([lab] + [repr(float(v)) for v in row]) + "\n")
    return buf.getvalue().encode()


def table_csv(header: list[str], rows: list[list], tag: Optional[str] = None) -> bytes:
    buf = io.StringIO()
    if tag:
        buf.write(f"# run_hash: {tag}\n")
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(_cell(v) for v in row) + "\n")
    return buf.getvalue().encode()


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return '"' + " ".join(_cell(x) for x in v) + '"'
    if v is None:
        return ""
    return str(v)
