"""Readers and writers for every on-disk format.

Floats are written with ``repr`` so that write/read round trips are bit-exact.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .data import AMINO_ACIDS, NUM_AA, Backbone, NeighborHit, ParseError, Sequence

CHECKPOINT_MAGIC = "REFOLD-CKPT v1"


def _fmt(x) -> str:
    return repr(float(x))


def _parse_float(text: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric value {text!r}", line=line) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value {text!r}", line=line)
    return value


# -- FASTA -------------------------------------------------------------------

def parse_fasta(text: str) -> list[Sequence]:
    records: list[tuple[str, int, list[str]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            header = line[1:].strip()
            records.append((header.split()[0] if header else "", lineno, []))
        elif not records:
            raise ParseError("sequence data before the first '>' header", line=lineno)
        else:
            records[-1][2].append(line.upper())

    out = []
    for name, lineno, chunks in records:
        residues = "".join(chunks)
        for pos, c in enumerate(residues, start=1):
            if c not in AMINO_ACIDS:
                raise ParseError(f"record {name!r}: unknown residue {c!r}", line=lineno, position=pos)
        if not residues:
            raise ParseError(f"record {name!r} has no residues", line=lineno)
        out.append(Sequence(name, residues))
    return out


def format_fasta(seqs, width: int = 60) -> str:
    lines = []
    for s in seqs:
        lines.append(f">{s.id}")
        lines.extend(s.residues[i:i + width] for i in range(0, len(s.residues), width))
    return "\n".join(lines) + ("\n" if lines else "")


def read_fasta(path) -> list[Sequence]:
    return parse_fasta(Path(path).read_text())


def write_fasta(seqs, path):
    Path(path).write_text(format_fasta(seqs))


# -- Backbones -----------------------------------------------------------------

def parse_backbone(text: str, id: str | None = None) -> Backbone:
    """Parse either the native ``id L`` table or the ATOM records of a PDB file."""
    for line in text.splitlines():
        if line.startswith(("ATOM", "HETATM")):
            return _parse_pdb(text, id)
    return _parse_native_backbone(text, id)


def _parse_native_backbone(text: str, id: str | None) -> Backbone:
    lines = [(n, l.split()) for n, l in enumerate(text.splitlines(), start=1) if l.strip()]
    if not lines:
        raise ParseError("empty backbone file")
    hline, header = lines[0]
    if len(header) != 2:
        raise ParseError("backbone header must be 'id L'", line=hline)
    name, declared = header
    try:
        length = int(declared)
    except ValueError:
        raise ParseError(f"backbone length {declared!r} is not an integer", line=hline) from None
    body = lines[1:]
    if len(body) != length:
        raise ParseError(f"header declares {length} residues but {len(body)} rows follow", line=hline)
    coords = np.empty((length, 3, 3))
    for res, (lineno, cells) in enumerate(body):
        if len(cells) != 9:
            raise ParseError(f"residue {res + 1}: expected 9 coordinates (N, CA, C), got {len(cells)}",
                             line=lineno)
        coords[res] = np.array([_parse_float(c, lineno) for c in cells]).reshape(3, 3)
    return Backbone(id or name, coords)


def _parse_pdb(text: str, id: str | None) -> Backbone:
    residues: "OrderedDict[tuple[int, str], dict]" = OrderedDict()
    last_num = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.startswith("ENDMDL"):
            break
        if not line.startswith("ATOM"):
            continue
        atom = line[12:16].strip()
        if atom not in ("N", "CA", "C"):
            continue
        altloc = line[16:17]
        if altloc not in (" ", "", "A"):
            continue
        try:
            resnum = int(line[22:26])
        except ValueError:
            raise ParseError(f"bad residue number {line[22:26]!r}", line=lineno) from None
        key = (resnum, line[26:27].strip())
        if key not in residues:
            if last_num is not None and resnum < last_num:
                raise ParseError(f"non-monotonic residue numbering: {resnum} after {last_num}", line=lineno)
            last_num = resnum
            residues[key] = {}
        xyz = [_parse_float(line[s:e], lineno) for s, e in ((30, 38), (38, 46), (46, 54))]
        residues[key].setdefault(atom, xyz)
    if not residues:
        raise ParseError("no N/CA/C ATOM records found")
    coords = np.empty((len(residues), 3, 3))
    for i, ((num, icode), atoms) in enumerate(residues.items()):
        for a, name in enumerate(("N", "CA", "C")):
            if name not in atoms:
                raise ParseError(f"residue {num}{icode} is missing atom {name}")
            coords[i, a] = atoms[name]
    return Backbone(id or "pdb", coords)


def format_backbone(b: Backbone) -> str:
    lines = [f"{b.id} {len(b)}"]
    for row in b.coords.reshape(len(b), 9):
        lines.append(" ".join(_fmt(x) for x in row))
    return "\n".join(lines) + "\n"


def read_backbone(path) -> Backbone:
    return parse_backbone(Path(path).read_text())


def write_backbone(b: Backbone, path):
    Path(path).write_text(format_backbone(b))


# -- Logits --------------------------------------------------------------------

def parse_logits(text: str) -> np.ndarray:
    lines = [(n, l.split()) for n, l in enumerate(text.splitlines(), start=1) if l.strip()]
    if not lines:
        raise ParseError("empty logits file")
    hline, header = lines[0]
    if len(header) != 2:
        raise ParseError("logits header must be 'L 20'", line=hline)
    try:
        length, cols = int(header[0]), int(header[1])
    except ValueError:
        raise ParseError("logits header must hold two integers", line=hline) from None
    if cols != NUM_AA:
        raise ParseError(f"expected {NUM_AA} residue columns, header declares {cols}", line=hline)
    body = lines[1:]
    if len(body) != length:
        raise ParseError(f"header declares L={length} but {len(body)} rows follow", line=hline)
    out = np.empty((length, NUM_AA))
    for i, (lineno, cells) in enumerate(body):
        if len(cells) != NUM_AA:
            raise ParseError(f"expected {NUM_AA} residue columns, got {len(cells)}", line=lineno)
        out[i] = [_parse_float(c, lineno) for c in cells]
    return out


def format_logits(m) -> str:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != NUM_AA:
        raise ValueError(f"expected {NUM_AA} residue columns, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("cannot write non-finite logits")
    lines = [f"{m.shape[0]} {NUM_AA}"]
    lines.extend(" ".join(_fmt(x) for x in row) for row in m)
    return "\n".join(lines) + "\n"


def read_logits(path) -> np.ndarray:
    return parse_logits(Path(path).read_text())


def write_logits(m, path):
    Path(path).write_text(format_logits(m))


# -- Hits ----------------------------------------------------------------------

def _parse_pairs(text: str, lineno: int) -> list[tuple[int, int]]:
    if text in ("", "-"):
        return []
    pairs = []
    for item in text.split(","):
        q, sep, t = item.partition(":")
        if not sep:
            raise ParseError(f"pair {item!r} is not of the form q:t", line=lineno)
        try:
            pairs.append((int(q), int(t)))
        except ValueError:
            raise ParseError(f"pair {item!r} holds a non-integer index", line=lineno) from None
    return pairs


def parse_hits(text: str) -> dict[str, list[NeighborHit]]:
    """Hits grouped by query id, each list sorted by descending TM-score."""
    grouped: dict[str, list[NeighborHit]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cells = line.rstrip("\n").split("\t")
        if len(cells) == 3:
            cells.append("")
        if len(cells) != 4:
            raise ParseError(f"expected 4 tab-separated fields, got {len(cells)}", line=lineno)
        query, target, tm_text, pair_text = (c.strip() for c in cells)
        tm = _parse_float(tm_text, lineno)
        if not 0.0 < tm <= 1.0:
            raise ParseError(f"tm_score {tm} outside (0, 1]", line=lineno)
        pairs = _parse_pairs(pair_text, lineno)
        for (q0, t0), (q1, t1) in zip(pairs, pairs[1:]):
            if q1 <= q0:
                raise ParseError(f"query indices not increasing at {q0}:{t0},{q1}:{t1}", line=lineno)
            if t1 <= t0:
                raise ParseError(f"target indices not increasing at {q0}:{t0},{q1}:{t1}", line=lineno)
        if any(q < 0 or t < 0 for q, t in pairs):
            raise ParseError("negative pair index", line=lineno)
        grouped.setdefault(query, []).append(NeighborHit(target, tm, tuple(pairs), query))
    for hits in grouped.values():
        hits.sort(key=lambda h: -h.tm_score)
    return grouped


def format_hits(hits, query_id: str | None = None) -> str:
    lines = []
    for h in hits:
        q = query_id if query_id is not None else h.query_id
        pairs = ",".join(f"{a}:{b}" for a, b in h.pairs)
        lines.append(f"{q}\t{h.target_id}\t{_fmt(h.tm_score)}\t{pairs}")
    return "\n".join(lines) + ("\n" if lines else "")


def read_hits(path) -> dict[str, list[NeighborHit]]:
    return parse_hits(Path(path).read_text())


# -- Checkpoints -----------------------------------------------------------------

def format_checkpoint(arrays: dict, meta: dict | None = None) -> str:
    """``REFOLD-CKPT v1``, optional ``meta key value`` lines, then ``array name d0 d1 ...``
    blocks holding the values row-major, one trailing-axis row per line."""
    lines = [CHECKPOINT_MAGIC]
    for key, value in (meta or {}).items():
        if any(ch.isspace() for ch in str(key)) or "\n" in str(value):
            raise ValueError(f"meta entry {key!r} must be a single token / line")
        lines.append(f"meta {key} {value}")
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise ValueError(f"array {name!r} holds non-finite values")
        lines.append(" ".join(["array", name, *map(str, a.shape)]))
        if a.size:
            rows = a.reshape(1, 1) if a.ndim == 0 else a.reshape(-1, a.shape[-1])
            lines.extend(" ".join(_fmt(x) for x in row) for row in rows)
    return "\n".join(lines) + "\n"


def parse_checkpoint(text: str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        raise ParseError(f"missing '{CHECKPOINT_MAGIC}' header", line=1)
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        head, _, rest = line.partition(" ")
        if head == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
            continue
        if head != "array":
            raise ParseError(f"unexpected record {head!r}", line=i)
        fields = rest.split()
        if not fields:
            raise ParseError("array record without a name", line=i)
        name = fields[0]
        try:
            shape = tuple(int(d) for d in fields[1:])
        except ValueError:
            raise ParseError(f"array {name!r}: bad shape", line=i) from None
        size = int(np.prod(shape)) if shape else 1
        values: list[float] = []
        while len(values) < size:
            if i >= len(lines):
                raise ParseError(f"array {name!r}: expected {size} values, file ended", line=i)
            values.extend(_parse_float(c, i + 1) for c in lines[i].split())
            i += 1
        if len(values) != size:
            raise ParseError(f"array {name!r}: expected {size} values, got {len(values)}", line=i)
        arrays[name] = np.array(values, dtype=np.float64).reshape(shape)
    return arrays, meta


def write_checkpoint(path, arrays: dict, meta: dict | None = None):
    Path(path).write_text(format_checkpoint(arrays, meta))


def read_checkpoint(path):
    return parse_checkpoint(Path(path).read_text())
