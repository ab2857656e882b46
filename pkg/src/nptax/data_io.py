"""Reading libraries and queries, persisting models, writing predictions.

Model file layout (all integers little-endian)::

    8 bytes   magic  b"NPTAXMDL"
    u32       format version
    u64       header length H
    H bytes   UTF-8 JSON header (ranks, kernel, level parameters, rho,
              taxon labels, and an index of the arrays that follow)
    ...       raw array blobs, each described in the header by dtype,
              shape, byte offset (relative to the end of the header),
              length and CRC-32
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .classifier import Annotation, RankCall, TrainedModel
from .errors import DataError, ModelFormatError
from .sequence_model import Hyperparameters, KernelSpec
from .species_prior import LevelParams
from .taxonomy import TaxonNode, TaxonomicTree, fill_dummy_ranks

MAGIC = b"NPTAXMDL"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")

_CLEAN = {ord(c): "-" for c in map(chr, range(256)) if c not in "ACGT"}


def clean_sequence(raw: str) -> str:
    """Upper-case and turn every non-ACGT character into a gap."""
    return raw.strip().upper().translate(_CLEAN)


@dataclass(frozen=True)
class LibraryRecord:
    id: str
    labels: tuple[str, ...]
    sequence: str


@dataclass
class Library:
    records: list[LibraryRecord]
    ranks: tuple[str, ...]
    missing_taxonomy: list[str] = field(default_factory=list)
    missing_sequence: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# FASTA / TSV


def read_fasta(path) -> Iterator[tuple[str, str]]:
    """Stream ``(header, sequence)`` pairs from a multi-line FASTA file.

    ``header`` is the full text after '>' with surrounding whitespace removed.
    """
    header, chunks = None, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\r\n")
            if line.startswith(">"):
                if header is not None:
                    yield header, "".join(chunks)
                header, chunks = line[1:].strip(), []
            elif line.strip():
                if header is None:
                    raise DataError(f"{path}: sequence data before the first '>' header")
                chunks.append(line.strip())
    if header is not None:
        yield header, "".join(chunks)


def _split_header(header: str, embedded_taxonomy: bool) -> tuple[str, tuple[str, ...] | None]:
    if embedded_taxonomy:
        head, sep, tax = header.partition(";tax=")
        if not sep:
            raise DataError(f"header {header!r} lacks ';tax='")
        return head.split()[0] if head.split() else head, tuple(t.strip() for t in tax.split(","))
    parts = header.split()
    if not parts:
        raise DataError("empty FASTA header")
    return parts[0], None


def read_queries(path, embedded_taxonomy: bool = False) -> Iterator[LibraryRecord]:
    """Query records in file order; labels are empty unless embedded."""
    for header, seq in read_fasta(path):
        sid, labels = _split_header(header, embedded_taxonomy)
        yield LibraryRecord(sid, labels or (), clean_sequence(seq))


def read_taxonomy(path) -> tuple[tuple[str, ...], dict[str, tuple[str, ...]]]:
    """Tab-separated taxonomy: header row ``id<TAB>rank1...``; blanks are dummy-filled."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\r\n") for ln in fh]
    if not lines:
        raise DataError(f"{path}: empty taxonomy file")
    head = lines[0].split("\t")
    ranks = tuple(h.strip() for h in head[1:])
    if len(ranks) < 2:
        raise DataError(f"{path}: need an id column and at least two rank columns")
    table: dict[str, tuple[str, ...]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        cells += [""] * (len(head) - len(cells))
        if len(cells) != len(head):
            raise DataError(f"{path}:{lineno}: expected {len(head)} columns, got {len(cells)}")
        sid = cells[0].strip()
        if sid in table:
            raise DataError(f"{path}:{lineno}: duplicate id {sid!r}")
        try:
            table[sid] = fill_dummy_ranks(cells[1:])
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return ranks, table


def load_library(fasta_path, taxonomy_path=None, ranks: Sequence[str] | None = None,
                 strict: bool = False, embedded_taxonomy: bool = False) -> Library:
    """Join sequences with their taxonomy by id, in FASTA order.

    Ids present in only one of the two inputs are collected on the result;
    with ``strict`` they are an error instead.
    """
    if not Path(fasta_path).exists():
        raise DataError(f"no such file: {fasta_path}")
    if embedded_taxonomy:
        records, seen = [], set()
        for rec in read_queries(fasta_path, embedded_taxonomy=True):
            if rec.id in seen:
                raise DataError(f"duplicate sequence id {rec.id!r}")
            seen.add(rec.id)
            records.append(LibraryRecord(rec.id, fill_dummy_ranks(rec.labels), rec.sequence))
        depth = {len(r.labels) for r in records}
        if len(depth) > 1:
            raise DataError(f"records carry different numbers of ranks: {sorted(depth)}")
        n = depth.pop() if depth else 0
        ranks = tuple(ranks) if ranks else tuple(f"level{i}" for i in range(1, n + 1))
        if len(ranks) != n:
            raise DataError(f"{len(ranks)} rank names given for {n} ranks")
        return Library(records, ranks)

    if taxonomy_path is None or not Path(taxonomy_path).exists():
        raise DataError(f"no such file: {taxonomy_path}")
    file_ranks, table = read_taxonomy(taxonomy_path)
    if ranks and tuple(ranks) != file_ranks:
        raise DataError(f"taxonomy header ranks {file_ranks} differ from requested {tuple(ranks)}")
    records, missing_tax, seen = [], [], set()
    for header, seq in read_fasta(fasta_path):
        sid, _ = _split_header(header, False)
        if sid in seen:
            raise DataError(f"duplicate sequence id {sid!r}")
        seen.add(sid)
        labels = table.get(sid)
        if labels is None:
            missing_tax.append(sid)
            continue
        records.append(LibraryRecord(sid, labels, clean_sequence(seq)))
    missing_seq = [sid for sid in table if sid not in seen]
    if strict and (missing_tax or missing_seq):
        raise DataError(f"{len(missing_tax)} sequences lack a taxonomy and "
                        f"{len(missing_seq)} taxonomy rows lack a sequence")
    return Library(records, file_ranks, missing_tax, missing_seq)


def write_fasta(records: Sequence[LibraryRecord], path, width: int = 80,
                embedded_taxonomy: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            head = r.id + (";tax=" + ",".join(r.labels) if embedded_taxonomy else "")
            fh.write(f">{head}\n")
            for i in range(0, len(r.sequence), width):
                fh.write(r.sequence[i:i + width] + "\n")


def write_taxonomy(records: Sequence[LibraryRecord], ranks: Sequence[str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id\t" + "\t".join(ranks) + "\n")
        for r in records:
            fh.write(r.id + "\t" + "\t".join(r.labels) + "\n")


# ---------------------------------------------------------------------------
# model container


def _tree_arrays(tree: TaxonomicTree) -> dict[str, np.ndarray]:
    out = {}
    for lv in range(1, tree.depth + 1):
        out[f"parents_{lv}"] = tree.parents[lv].astype("<i8")
        out[f"seq_counts_{lv}"] = tree.seq_counts[lv].astype("<i8")
    return out


def save_model(model: TrainedModel, path) -> None:
    tree = model.tree
    arrays = _tree_arrays(tree)
    counts = model.leaf_counts
    count_dtype = "<i4" if counts.size == 0 or counts.max() < 2 ** 31 else "<i8"
    arrays["leaf_counts"] = counts.astype(count_dtype)
    for lv, xi in enumerate(model.hyper.node_xi):
        arrays[f"node_xi_{lv}"] = np.ascontiguousarray(xi, dtype="<f8")

    index, offset, blobs = [], 0, []
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        blobs.append(raw)
        offset += len(raw)

    header = {
        "format": "nptax-model",
        "version": FORMAT_VERSION,
        "ranks": list(tree.levels),
        "kernel": {"kind": model.spec.kind, "p": model.spec.p, "kappa": model.spec.kappa},
        "level_params": [{"level": p.level, "alpha": p.alpha, "sigma": p.sigma} for p in model.params],
        "rho": model.rho,
        "n_sequences": tree.n,
        "labels": [[n.label for n in tree.nodes[lv]] for lv in range(1, tree.depth + 1)],
        "arrays": index,
        "data_bytes": offset,
    }
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def _read_preamble(fh, path) -> dict:
    pre = fh.read(_PREAMBLE.size)
    if len(pre) < _PREAMBLE.size:
        raise ModelFormatError(f"{path}: file too short to be a model")
    magic, version, head_len = _PREAMBLE.unpack(pre)
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: not a model file")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    head = fh.read(head_len)
    if len(head) != head_len:
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt header ({exc})") from None
    if header.get("format") != "nptax-model" or header.get("version") != version:
        raise ModelFormatError(f"{path}: header does not match preamble")
    return header


def read_model_header(path) -> dict:
    """Model metadata without touching the arrays."""
    with open(path, "rb") as fh:
        header = _read_preamble(fh, path)
    header.pop("arrays", None)
    header.pop("labels", None)
    return header


def _rebuild_tree(ranks, labels, arrays) -> TaxonomicTree:
    L = len(ranks)
    n = sum(int(c) for c in arrays["seq_counts_1"])
    nodes = [[TaxonNode(0, 0, (), -1, tuple(range(len(labels[0]))), n)]]
    for lv in range(1, L + 1):
        parents = arrays[f"parents_{lv}"]
        counts = arrays[f"seq_counts_{lv}"]
        if len(parents) != len(labels[lv - 1]) or len(counts) != len(parents):
            raise ModelFormatError(f"level {lv}: label and array lengths disagree")
        if len(parents) and (parents.min() < 0 or parents.max() >= len(nodes[lv - 1])):
            raise ModelFormatError(f"level {lv}: parent index out of range")
        kids: list[list[int]] = [[] for _ in range(len(parents))]
        if lv < L:
            for i, p in enumerate(arrays[f"parents_{lv + 1}"]):
                if 0 <= p < len(kids):
                    kids[p].append(i)
        level_nodes = []
        for i, (p, lab, c) in enumerate(zip(parents, labels[lv - 1], counts)):
            path = nodes[lv - 1][p].path + (lab,)
            level_nodes.append(TaxonNode(lv, i, path, int(p), tuple(kids[i]), int(c)))
        nodes.append(level_nodes)
    tree = TaxonomicTree(ranks, nodes, {})
    for lv in range(L):
        sums = np.bincount(tree.parents[lv + 1], weights=tree.seq_counts[lv + 1],
                           minlength=len(nodes[lv]))
        if np.any(sums != tree.seq_counts[lv]) or np.any(tree.child_counts[lv] < 1):
            raise ModelFormatError(f"level {lv}: stored counts violate the tree invariants")
    return tree


def load_model(path) -> TrainedModel:
    """Read a model written by :func:`save_model`, validating layout and invariants."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, "rb") as fh:
        header = _read_preamble(fh, path)
        data = fh.read()
    if len(data) != header.get("data_bytes"):
        raise ModelFormatError(f"{path}: expected {header.get('data_bytes')} data bytes, found {len(data)}")
    arrays = {}
    for entry in header["arrays"]:
        start, size = entry["offset"], entry["nbytes"]
        if start < 0 or start + size > len(data):
            raise ModelFormatError(f"{path}: array {entry['name']} lies outside the file")
        raw = data[start:start + size]
        if zlib.crc32(raw) != entry["crc32"]:
            raise ModelFormatError(f"{path}: checksum mismatch in {entry['name']}")
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        if int(np.prod(shape)) * dtype.itemsize != size:
            raise ModelFormatError(f"{path}: array {entry['name']} has inconsistent length")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))

    try:
        ranks = tuple(header["ranks"])
        kern = header["kernel"]
        spec = KernelSpec(kern["kind"], p=kern.get("p"), kappa=kern.get("kappa"))
        params = [LevelParams(int(p["level"]), float(p["alpha"]), float(p["sigma"]))
                  for p in header["level_params"]]
        tree = _rebuild_tree(ranks, header["labels"], arrays)
        counts = arrays["leaf_counts"].astype(np.int64)
        node_xi = [arrays[f"node_xi_{lv}"] for lv in range(len(ranks))]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{path}: invalid model contents ({exc})") from None

    if counts.shape != (len(tree.leaves), spec.n_features) or counts.min(initial=0) < 0:
        raise ModelFormatError(f"{path}: leaf count table has the wrong shape or negative entries")
    for lv, xi in enumerate(node_xi):
        if xi.shape != (len(tree.nodes[lv]), spec.n_features) or not np.all(xi > 0):
            raise ModelFormatError(f"{path}: hyperparameters at level {lv} are malformed")
    return TrainedModel(tree, params, spec, counts, Hyperparameters(node_xi), float(header["rho"]))


# ---------------------------------------------------------------------------
# predictions


def _fmt(p: float) -> str:
    return f"{p:.6g}"


def write_predictions(annotations: Sequence[Annotation], path, ranks: Sequence[str],
                      fmt: str = "tsv", topk: int | None = None) -> None:
    """One row per query, in input order.

    TSV columns: ``id``, then ``<rank>``, ``<rank>_prob``, ``<rank>_novel``
    per rank, then ``top1``..``topk`` as ``label:probability``.
    """
    if fmt not in ("tsv", "jsonl"):
        raise ValueError("format must be 'tsv' or 'jsonl'")
    if topk is None:
        topk = max((len(a.top) for a in annotations), default=0)
    try:
        fh = open(path, "w", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None
    with fh:
        if fmt == "tsv":
            cols = ["id"]
            for r in ranks:
                cols += [r, f"{r}_prob", f"{r}_novel"]
            cols += [f"top{i}" for i in range(1, topk + 1)]
            fh.write("\t".join(cols) + "\n")
            for a in annotations:
                row = [a.query_id]
                for c in a.calls:
                    row += [c.label, _fmt(c.probability), str(int(c.novel))]
                tops = [f"{lab}:{_fmt(p)}" for lab, p in a.top[:topk]]
                row += tops + [""] * (topk - len(tops))
                fh.write("\t".join(row) + "\n")
        else:
            for a in annotations:
                fh.write(json.dumps({
                    "id": a.query_id,
                    "ranks": [{"rank": c.rank, "label": c.label, "probability": float(_fmt(c.probability)),
                               "novel": c.novel, "path": list(c.path)} for c in a.calls],
                    "top": [{"label": lab, "probability": float(_fmt(p))} for lab, p in a.top[:topk]],
                }) + "\n")


def _read_predictions_jsonl(lines, path) -> tuple[tuple[str, ...], list[Annotation]]:
    out, ranks = [], None
    try:
        for line in lines:
            row = json.loads(line)
            calls = [RankCall(c["rank"], c["label"], float(c["probability"]), bool(c["novel"]), tuple(c["path"]))
                     for c in row["ranks"]]
            row_ranks = tuple(c.rank for c in calls)
            if ranks is None:
                ranks = row_ranks
            elif row_ranks != ranks:
                raise DataError(f"{path}: rows disagree on ranks")
            out.append(Annotation(row["id"], calls, [(t["label"], float(t["probability"])) for t in row["top"]]))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed predictions line: {exc}") from None
    return ranks, out


def read_predictions(path) -> tuple[tuple[str, ...], list[Annotation]]:
    """Parse a predictions file (TSV or JSON lines) back into annotations.

    Node paths are reconstructed from the observed labels preceding each
    call, which is all the scoring code needs.
    """
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\r\n") for ln in fh if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty predictions file")
    if lines[0].startswith("{"):
        return _read_predictions_jsonl(lines, path)
    head = lines[0].split("\t")
    ranks = tuple(h for h in head[1::3] if f"{h}_prob" in head and f"{h}_novel" in head)
    if head[0] != "id" or head[1:1 + 3 * len(ranks)] != [c for r in ranks for c in (r, f"{r}_prob", f"{r}_novel")]:
        raise DataError(f"{path}: not a predictions table")
    L = len(ranks)
    out = []
    for line in lines[1:]:
        cells = line.split("\t")
        if len(cells) < 1 + 3 * L:
            raise DataError(f"{path}: row for {cells[0]!r} has {len(cells)} columns")
        calls, observed = [], ()
        for i, rank in enumerate(ranks):
            label, prob, novel = cells[1 + 3 * i: 4 + 3 * i]
            novel = novel == "1"
            if not novel:
                observed = observed + (label,)
            calls.append(RankCall(rank, label, float(prob), novel, observed))
        top = []
        for cell in cells[1 + 3 * L:]:
            if cell:
                lab, _, p = cell.rpartition(":")
                top.append((lab, float(p)))
        out.append(Annotation(cells[0], calls, top))
    return ranks, out
