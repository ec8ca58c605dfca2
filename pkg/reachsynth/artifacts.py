"""
On-disk artifacts passed between pipeline stages.

Binary files start with a 4-byte magic, a little-endian uint16 format
version and a uint32-length-prefixed JSON header (sorted keys), followed by
raw little-endian arrays in a fixed order:

    RSTS  transition system: offsets <i8, successors <i4, safe mask u1,
          reach lo <f8, reach hi <f8
    RSCT  controller: choice <i4, status u1, rank <i4

Every header carries the digest of the configuration that produced the
artifact; readers refuse a file whose digest does not match the expected one.
"""
import json
import logging
import struct
from typing import Dict, List, Optional, Tuple

import numpy as np

from reachsynth.abstraction import InputGrid, TransitionSystem
from reachsynth.errors import ArtifactError
from reachsynth.funnel import DOMAIN_KEYS, FunnelCertificate
from reachsynth.games import MODES, ControllerTable
from reachsynth.interval_core import Box, PartitionGrid
from reachsynth.polynomial import GROUPS, PolynomialMap, VariableLayout

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
TS_MAGIC = b"RSTS"
CONTROLLER_MAGIC = b"RSCT"
CERTIFICATE_MAGIC = "reachsynth-certificate"
_PREAMBLE = struct.Struct("<4sHI")


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def _pack(magic: bytes, header: Dict, arrays: List[Tuple[np.ndarray, str]]) -> bytes:
    head = canonical_json(header).encode("utf-8")
    parts = [_PREAMBLE.pack(magic, FORMAT_VERSION, len(head)), head]
    parts += [np.ascontiguousarray(a, dtype=dt).tobytes() for a, dt in arrays]
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes, magic: bytes, path: str):
        self.path = path
        if len(blob) < _PREAMBLE.size:
            raise ArtifactError(f"{path}: file too short")
        found, version, size = _PREAMBLE.unpack_from(blob)
        if found != magic:
            raise ArtifactError(f"{path}: bad magic {found!r}, expected {magic!r}")
        if version != FORMAT_VERSION:
            raise ArtifactError(f"{path}: unsupported format version {version}")
        start = _PREAMBLE.size
        try:
            self.header = json.loads(blob[start:start + size].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ArtifactError(f"{path}: unreadable header: {exc}") from exc
        self.blob = blob
        self.pos = start + size

    def array(self, dtype: str, count: int, shape=None) -> np.ndarray:
        dt = np.dtype(dtype)
        end = self.pos + dt.itemsize * count
        if count < 0 or end > len(self.blob):
            raise ArtifactError(f"{self.path}: truncated array section")
        values = np.frombuffer(self.blob, dtype=dt, count=count, offset=self.pos)
        self.pos = end
        return values.reshape(shape) if shape is not None else values

    def finish(self):
        if self.pos != len(self.blob):
            raise ArtifactError(f"{self.path}: {len(self.blob) - self.pos} trailing bytes")


def _check_digest(path: str, found: str, expected: Optional[str]):
    if expected is not None and found != expected:
        raise ArtifactError(f"{path}: config digest {found[:12]} does not match the current config {expected[:12]}")


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc


def write_transition_system(path: str, ts: TransitionSystem):
    header = {
        "config_digest": ts.config_digest,
        "grid": ts.grid.to_json(),
        "inputs": ts.inputs.to_json(),
        "counts": {
            "cells": ts.num_cells,
            "inputs": ts.num_inputs,
            "transitions": ts.num_transitions,
            "reach_dim": int(ts.reach_lo.shape[-1]) if ts.reach_lo.ndim == 2 else ts.grid.dim,
        },
        "stats": ts.stats,
    }
    blob = _pack(TS_MAGIC, header, [
        (ts.offsets, "<i8"),
        (ts.successors, "<i4"),
        (ts.safe_mask, "u1"),
        (ts.reach_lo, "<f8"),
        (ts.reach_hi, "<f8"),
    ])
    with open(path, "wb") as f:
        f.write(blob)
    logger.info(f"Wrote transition system to {path} ({len(blob)} bytes)")


def read_transition_system(path: str, expected_digest: Optional[str] = None) -> TransitionSystem:
    r = _Reader(_read_bytes(path), TS_MAGIC, path)
    h = r.header
    try:
        grid = PartitionGrid.from_json(h["grid"])
        inputs = InputGrid.from_json(h["inputs"])
        counts = h["counts"]
        cells, k, transitions, dim = counts["cells"], counts["inputs"], counts["transitions"], counts["reach_dim"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"{path}: malformed header: {exc}") from exc
    if cells != grid.total_cells or k != len(inputs):
        raise ArtifactError(f"{path}: header counts disagree with the grid and input spec")
    pairs = cells * k
    offsets = r.array("<i8", pairs + 1)
    successors = r.array("<i4", transitions)
    safe = r.array("u1", cells).astype(bool)
    reach_lo = r.array("<f8", pairs * dim, (pairs, dim))
    reach_hi = r.array("<f8", pairs * dim, (pairs, dim))
    r.finish()
    if offsets[0] != 0 or offsets[-1] != transitions or np.any(np.diff(offsets) < 0):
        raise ArtifactError(f"{path}: offsets are not a valid row index")
    if transitions and (successors.min() < 0 or successors.max() > cells):
        raise ArtifactError(f"{path}: successor index out of range")
    _check_digest(path, h.get("config_digest", ""), expected_digest)
    return TransitionSystem(grid, inputs, offsets, successors, safe, reach_lo, reach_hi,
                            h.get("stats"), h.get("config_digest", ""))


def export_transition_system_text(ts: TransitionSystem) -> str:
    """One line per pair, `s u: s' s'' ...`; Out is written as its index."""
    lines = [f"# cells {ts.num_cells} inputs {ts.num_inputs} out {ts.out}"]
    for s in range(ts.num_cells):
        for u in range(ts.num_inputs):
            succ = " ".join(str(int(v)) for v in ts.successors_of(s, u))
            lines.append(f"{s} {u}: {succ}")
    return "\n".join(lines) + "\n"


def write_controller(path: str, table: ControllerTable):
    header = {
        "config_digest": table.config_digest,
        "mode": table.mode,
        "counts": {"cells": table.num_cells},
        "stats": table.stats,
    }
    blob = _pack(CONTROLLER_MAGIC, header, [
        (table.choice, "<i4"),
        (table.status, "u1"),
        (table.rank, "<i4"),
    ])
    with open(path, "wb") as f:
        f.write(blob)
    logger.info(f"Wrote controller to {path}")


def read_controller(path: str, expected_digest: Optional[str] = None) -> ControllerTable:
    r = _Reader(_read_bytes(path), CONTROLLER_MAGIC, path)
    h = r.header
    try:
        cells = int(h["counts"]["cells"])
        mode = h["mode"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"{path}: malformed header: {exc}") from exc
    if mode not in MODES:
        raise ArtifactError(f"{path}: unknown game mode {mode!r}")
    choice = r.array("<i4", cells)
    status = r.array("u1", cells)
    rank = r.array("<i4", cells)
    r.finish()
    if np.any(status > 2):
        raise ArtifactError(f"{path}: invalid cell status")
    _check_digest(path, h.get("config_digest", ""), expected_digest)
    return ControllerTable(status, choice, rank, mode, h.get("config_digest", ""), h.get("stats"))


def export_controller_text(table: ControllerTable) -> str:
    lines = ["# cell status input rank"]
    for s in range(table.num_cells):
        lines.append(f"{s} {int(table.status[s])} {int(table.choice[s])} {int(table.rank[s])}")
    return "\n".join(lines) + "\n"


# certificates are plain text so externally synthesized ones can be imported

def certificate_to_text(cert: FunnelCertificate, config_digest: str = "") -> str:
    arities = " ".join(f"{g}={cert.layout.arities[g]}" for g in GROUPS)
    lines = [
        f"{CERTIFICATE_MAGIC} {FORMAT_VERSION}",
        f"digest {config_digest or '-'}",
        f"layout {arities}",
        f"gamma {cert.gamma!r}",
        f"T_s {cert.T_s!r}",
        f"E0 {canonical_json(cert.E0.to_json())}",
    ]
    for key in DOMAIN_KEYS:
        box = cert.domains.get(key)
        lines.append(f"domain {key} {canonical_json(box.to_json()) if box is not None else 'null'}")
    lines.append("V")
    lines += cert.V.to_lines()
    lines.append("kappa")
    lines += cert.kappa.to_lines()
    lines.append(f"verdicts {canonical_json(cert.verdicts)}")
    lines.append(f"meta {canonical_json(cert.meta)}")
    return "\n".join(lines) + "\n"


def _polynomial_block(lines: List[str], start: int, layout: VariableLayout) -> Tuple[PolynomialMap, int]:
    count = int(lines[start].split()[1])
    block = lines[start:start + 1 + count]
    return PolynomialMap.from_lines(layout, block), start + 1 + count


def certificate_from_text(text: str, expected_digest: Optional[str] = None,
                          source: str = "<certificate>") -> Tuple[FunnelCertificate, str]:
    """Parse a certificate; returns (certificate, config digest)."""
    lines = [line for line in text.splitlines() if line.strip()]
    try:
        magic, version = lines[0].split()
        if magic != CERTIFICATE_MAGIC or int(version) != FORMAT_VERSION:
            raise ArtifactError(f"{source}: not a version {FORMAT_VERSION} certificate")
        digest = lines[1].split(maxsplit=1)[1]
        digest = "" if digest == "-" else digest
        arities = dict(item.split("=") for item in lines[2].split()[1:])
        layout = VariableLayout(**{g: int(n) for g, n in arities.items()})
        fields = {}
        for line in lines[3:6]:
            key, value = line.split(maxsplit=1)
            fields[key] = value
        domains = {}
        pos = 6
        while lines[pos].startswith("domain "):
            _, key, value = lines[pos].split(maxsplit=2)
            data = json.loads(value)
            domains[key] = Box.from_json(data) if data is not None else None
            pos += 1
        if lines[pos] != "V":
            raise ArtifactError(f"{source}: expected the V block at line {pos + 1}")
        V, pos = _polynomial_block(lines, pos + 1, layout)
        if lines[pos] != "kappa":
            raise ArtifactError(f"{source}: expected the kappa block at line {pos + 1}")
        kappa, pos = _polynomial_block(lines, pos + 1, layout)
        trailer = dict(line.split(maxsplit=1) for line in lines[pos:])
        cert = FunnelCertificate(V, kappa, float(fields["gamma"]), float(fields["T_s"]),
                                 Box.from_json(json.loads(fields["E0"])), domains,
                                 json.loads(trailer.get("verdicts", "{}")), json.loads(trailer.get("meta", "{}")))
    except ArtifactError:
        raise
    except (IndexError, KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"{source}: malformed certificate: {exc}") from exc
    _check_digest(source, digest, expected_digest)
    return cert, digest


def write_certificate(path: str, cert: FunnelCertificate, config_digest: str = ""):
    with open(path, "w") as f:
        f.write(certificate_to_text(cert, config_digest))
    logger.info(f"Wrote certificate to {path}")


def read_certificate(path: str, expected_digest: Optional[str] = None) -> Tuple[FunnelCertificate, str]:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc
    return certificate_from_text(text, expected_digest, source=path)


def write_json(path: str, data: Dict):
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: str) -> Dict:
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc
