"""
Text and binary file formats.

Text inputs (graphs, observations, labels) are tab separated UTF-8 with a
header line and ``#`` comments. Matrices are stored in a little-endian
frame: magic ``KRNL``, u32 version, u64 rows, u64 cols, then row-major
float64 values. Models use a section-tagged container (magic ``TGPM``) whose
sections are either matrix frames or JSON documents. Every write goes
through a temporary file and an atomic rename.
"""

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..config.settings import CONTAINER_MAGIC, CONTAINER_VERSION, MATRIX_MAGIC, MATRIX_VERSION
from ..errors import DataError
from ..model.kernels import GraphAdjacency, KernelBasis
from ..model.meanfit import Hyperparams, MeanModel, SparseObservations
from ..model.ranking import LabeledObservations, RankingState

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_FRAME_HEADER = struct.Struct('<4sIQQ')
_CONTAINER_HEADER = struct.Struct('<4sII')
_SECTION_MATRIX = b'M'
_SECTION_JSON = b'J'


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode('utf-8'))


def write_json(path: PathLike, document: Any) -> None:
    atomic_write_text(path, json.dumps(document, indent=2, sort_keys=True) + '\n')


def read_json(path: PathLike, what: str = 'JSON') -> Any:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError:
        raise DataError(f"Error reading {what} file: {path} does not exist")
    except json.JSONDecodeError as e:
        raise DataError(f"Error reading {what} file {path}: line {e.lineno}: {e.msg}")


# Matrix frames

def encode_matrix(matrix: np.ndarray) -> bytes:
    a = np.asarray(matrix, dtype='<f8')
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DataError(f"Only 2-D matrices can be framed, got shape {a.shape}")
    return _FRAME_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, a.shape[0], a.shape[1]) + a.tobytes(order='C')


def decode_matrix(buffer: bytes, offset: int = 0, source: str = 'matrix') -> Tuple[np.ndarray, int]:
    """Matrix at `offset` and the offset just past it"""
    if len(buffer) - offset < _FRAME_HEADER.size:
        raise DataError(f"Error reading {source}: truncated matrix header")
    magic, version, rows, cols = _FRAME_HEADER.unpack_from(buffer, offset)
    if magic != MATRIX_MAGIC:
        raise DataError(f"Error reading {source}: bad magic {magic!r}")
    if version != MATRIX_VERSION:
        raise DataError(f"Error reading {source}: unsupported version {version}")
    start = offset + _FRAME_HEADER.size
    end = start + 8 * rows * cols
    if end > len(buffer):
        raise DataError(f"Error reading {source}: expected {rows}x{cols} values, file is truncated")
    values = np.frombuffer(buffer, dtype='<f8', count=rows * cols, offset=start)
    return values.reshape(rows, cols).astype(float), end


def write_matrix(path: PathLike, matrix: np.ndarray) -> None:
    atomic_write_bytes(path, encode_matrix(matrix))


def read_matrix(path: PathLike) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"Error reading matrix file: {path} does not exist")
    matrix, end = decode_matrix(data, 0, source=str(path))
    if end != len(data):
        raise DataError(f"Error reading {path}: {len(data) - end} trailing bytes after matrix")
    return matrix


# Section-tagged container

def encode_container(sections: Sequence[Tuple[str, Any]]) -> bytes:
    """Sections are (tag, value); ndarray values become matrix frames, anything else JSON"""
    parts = [_CONTAINER_HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, len(sections))]
    for tag, value in sections:
        raw_tag = tag.encode('utf-8')
        parts.append(struct.pack('<H', len(raw_tag)) + raw_tag)
        if isinstance(value, np.ndarray):
            parts.append(_SECTION_MATRIX + encode_matrix(value))
        else:
            payload = json.dumps(value, sort_keys=True).encode('utf-8')
            parts.append(_SECTION_JSON + struct.pack('<Q', len(payload)) + payload)
    return b''.join(parts)


def decode_container(buffer: bytes, source: str = 'container') -> Dict[str, Any]:
    if len(buffer) < _CONTAINER_HEADER.size:
        raise DataError(f"Error reading {source}: truncated header")
    magic, version, count = _CONTAINER_HEADER.unpack_from(buffer, 0)
    if magic != CONTAINER_MAGIC:
        raise DataError(f"Error reading {source}: bad magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise DataError(f"Error reading {source}: unsupported version {version}")
    offset = _CONTAINER_HEADER.size
    sections = {}
    try:
        for _ in range(count):
            (tag_len,) = struct.unpack_from('<H', buffer, offset)
            offset += 2
            tag = buffer[offset:offset + tag_len].decode('utf-8')
            offset += tag_len
            kind = buffer[offset:offset + 1]
            offset += 1
            if kind == _SECTION_MATRIX:
                sections[tag], offset = decode_matrix(buffer, offset, f"{source} section '{tag}'")
            elif kind == _SECTION_JSON:
                (length,) = struct.unpack_from('<Q', buffer, offset)
                offset += 8
                sections[tag] = json.loads(buffer[offset:offset + length].decode('utf-8'))
                offset += length
            else:
                raise DataError(f"Error reading {source}: unknown section kind {kind!r} for '{tag}'")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"Error reading {source}: corrupt section table ({e})")
    return sections


@dataclass
class SavedModel:
    model: MeanModel
    hyperparams: Hyperparams
    report: Dict = field(default_factory=dict)
    state: Optional[Dict[int, Tuple[np.ndarray, np.ndarray]]] = None
    meta: Dict = field(default_factory=dict)


def save_model(path: PathLike, model: MeanModel, hyperparams: Hyperparams,
               report: Optional[Dict] = None, state: Optional[RankingState] = None,
               meta: Optional[Dict] = None) -> None:
    sections: List[Tuple[str, Any]] = [
        ('B', model.b_matrix),
        ('G_M', model.basis_m.entries),
        ('G_N', model.basis_n.entries),
        ('row_bias', model.row_bias.reshape(1, -1)),
        ('hyperparams', hyperparams.to_dict()),
        ('report', report or {}),
        ('meta', meta or {}),
    ]
    if state is not None:
        ids = sorted(state.tasks)
        xs = [state.tasks[m].x for m in ids]
        sections.append(('state_x', np.concatenate(xs).reshape(1, -1) if xs else np.zeros((1, 0))))
        sections.append(('state', {
            'tasks': ids,
            'lengths': [len(x) for x in xs],
            'perms': [state.tasks[m].perm.tolist() for m in ids],
        }))
    atomic_write_bytes(path, encode_container(sections))


def load_model(path: PathLike) -> SavedModel:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"Error reading model file: {path} does not exist")
    sections = decode_container(data, str(path))
    missing = [t for t in ('B', 'G_M', 'G_N', 'row_bias', 'hyperparams') if t not in sections]
    if missing:
        raise DataError(f"Error reading {path}: missing sections {missing}")
    model = MeanModel(sections['B'], KernelBasis(sections['G_M']), KernelBasis(sections['G_N']),
                      sections['row_bias'].reshape(-1))
    state = None
    if 'state' in sections:
        meta = sections['state']
        flat = sections['state_x'].reshape(-1)
        bounds = np.cumsum([0] + meta['lengths'])
        state = {
            int(m): (flat[bounds[i]:bounds[i + 1]], np.asarray(perm, dtype=np.int64))
            for i, (m, perm) in enumerate(zip(meta['tasks'], meta['perms']))
        }
    return SavedModel(model, Hyperparams.from_dict(sections['hyperparams']),
                      sections.get('report', {}), state, sections.get('meta', {}))


# Text formats

def _data_lines(path: PathLike, what: str) -> Iterator[Tuple[int, List[str]]]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            for number, line in enumerate(f, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith('#'):
                    continue
                yield number, stripped.split('\t')
    except FileNotFoundError:
        raise DataError(f"Error reading {what} file: {path} does not exist")
    except UnicodeDecodeError:
        raise DataError(f"Error reading {what} file {path}: not valid UTF-8")


def _parse_header(fields: List[str], keyword: str, count: int, where: str) -> List[int]:
    if fields[0] != keyword or len(fields) != count + 1:
        raise DataError(f"{where}: expected header '{keyword}' followed by {count} integers")
    try:
        values = [int(v) for v in fields[1:]]
    except ValueError:
        raise DataError(f"{where}: header values must be integers")
    if any(v < 1 for v in values):
        raise DataError(f"{where}: header values must be positive")
    return values


def _read_table(path: PathLike, what: str, keyword: str, n_header: int,
                widths: Tuple[int, ...]) -> Tuple[List[int], List[Tuple[int, List[str]]]]:
    header = None
    records = []
    for number, fields in _data_lines(path, what):
        where = f"Error reading {what} file {path}: line {number}"
        if header is None:
            header = _parse_header(fields, keyword, n_header, where)
            continue
        if len(fields) not in widths:
            raise DataError(f"{where}: expected {' or '.join(map(str, widths))} tab-separated fields, "
                            f"got {len(fields)}")
        records.append((number, fields))
    if header is None:
        raise DataError(f"Error reading {what} file {path}: missing '{keyword}' header")
    return header, records


def read_graph(path: PathLike) -> GraphAdjacency:
    """Edge list `i<TAB>j[<TAB>w]` (w defaults to 1.0) under a `nodes<TAB>N` header"""
    (n_nodes,), records = _read_table(path, 'graph', 'nodes', 1, (2, 3))
    edges = []
    for number, fields in records:
        try:
            i, j = int(fields[0]), int(fields[1])
            w = float(fields[2]) if len(fields) == 3 else 1.0
        except ValueError:
            raise DataError(f"Error reading graph file {path}: line {number}: malformed edge {fields}")
        if not (0 <= i < n_nodes and 0 <= j < n_nodes) or i == j or not w >= 0:
            raise DataError(f"Error reading graph file {path}: line {number}: invalid edge ({i}, {j}, {w})")
        edges.append((i, j, w))
    return GraphAdjacency(n_nodes, tuple(edges))


def _read_triples(path: PathLike, what: str) -> Tuple[int, int, np.ndarray, np.ndarray, List[str], List[int]]:
    (n_rows, n_cols), records = _read_table(path, what, 'dims', 2, (3,))
    rows, cols, values, lines = [], [], [], []
    seen = {}
    for number, fields in records:
        try:
            m, n = int(fields[0]), int(fields[1])
        except ValueError:
            raise DataError(f"Error reading {what} file {path}: line {number}: malformed indices {fields[:2]}")
        if not (0 <= m < n_rows and 0 <= n < n_cols):
            raise DataError(f"Error reading {what} file {path}: line {number}: "
                            f"index ({m}, {n}) outside {n_rows}x{n_cols}")
        if (m, n) in seen:
            raise DataError(f"Error reading {what} file {path}: line {number}: duplicate entry "
                            f"({m}, {n}), first seen on line {seen[(m, n)]}")
        seen[(m, n)] = number
        rows.append(m)
        cols.append(n)
        values.append(fields[2])
        lines.append(number)
    if not rows:
        raise DataError(f"Error reading {what} file {path}: no entries")
    return n_rows, n_cols, np.asarray(rows), np.asarray(cols), values, lines


def read_observations(path: PathLike) -> SparseObservations:
    n_rows, n_cols, rows, cols, raw, lines = _read_triples(path, 'observations')
    values = []
    for value, number in zip(raw, lines):
        try:
            values.append(float(value))
        except ValueError:
            raise DataError(f"Error reading observations file {path}: line {number}: bad value '{value}'")
    return SparseObservations(n_rows, n_cols, rows, cols, np.asarray(values))


def read_labels(path: PathLike) -> LabeledObservations:
    n_rows, n_cols, rows, cols, raw, lines = _read_triples(path, 'labels')
    labels = []
    for value, number in zip(raw, lines):
        if value not in ('1', '+1', '-1'):
            raise DataError(f"Error reading labels file {path}: line {number}: label must be +1 or -1, "
                            f"got '{value}'")
        labels.append(int(value))
    return LabeledObservations(n_rows, n_cols, rows, cols, np.asarray(labels))


def format_labels(labels: LabeledObservations, comments: Sequence[str] = ()) -> str:
    lines = [f"# {c}" for c in comments]
    lines.append(f"dims\t{labels.n_rows}\t{labels.n_cols}")
    lines.extend(f"{m}\t{n}\t{'+1' if y > 0 else '-1'}"
                 for m, n, y in zip(labels.rows, labels.cols, labels.labels))
    return '\n'.join(lines) + '\n'


def write_labels(path: PathLike, labels: LabeledObservations, comments: Sequence[str] = ()) -> None:
    atomic_write_text(path, format_labels(labels, comments))


def write_curves(path: PathLike, precision_at: Sequence[float], recall_at: Sequence[float]) -> None:
    """Plot data: `k<TAB>precision<TAB>recall` for k = 1..len"""
    lines = ['k\tprecision\trecall']
    lines.extend(f"{k}\t{p:.10g}\t{r:.10g}"
                 for k, (p, r) in enumerate(zip(precision_at, recall_at), start=1))
    atomic_write_text(path, '\n'.join(lines) + '\n')
