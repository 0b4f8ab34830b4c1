"""Multi-label dataset loading, label subsetting and random splits.

Supported inputs are the subset of ARFF used by the MULAN repository
(numeric and ``{0,1}`` nominal attributes, dense and sparse instance lines)
and plain CSV files with a header row.
"""
from __future__ import annotations

import csv
import io
import os
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import ArgumentError, DataIOError, ParseError, SchemaError

LabelSpec = Union[int, Sequence[str], str, os.PathLike]

FORMATS = ("arff_dense", "arff_sparse", "arff", "csv")

_NUMERIC_TYPES = {"numeric", "real", "integer"}


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple
    label_names: tuple

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        Y = np.asarray(self.labels)
        if X.ndim != 2 or Y.ndim != 2:
            raise SchemaError("features and labels must be 2-D")
        if X.shape[0] != Y.shape[0]:
            raise SchemaError(
                f"row mismatch: {X.shape[0]} feature rows vs {Y.shape[0]} label rows")
        if X.shape[0] < 1 or X.shape[1] < 1 or Y.shape[1] < 1:
            raise SchemaError(f"empty dataset: features {X.shape}, labels {Y.shape}")
        if not np.all((Y == 0) | (Y == 1)):
            raise SchemaError("labels must be 0/1")
        if len(self.feature_names) != X.shape[1]:
            raise SchemaError("feature_names length does not match features")
        if len(self.label_names) != Y.shape[1]:
            raise SchemaError("label_names length does not match labels")
        X = X.copy()
        Y = Y.astype(np.int8)
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", Y)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "label_names", tuple(self.label_names))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def q(self) -> int:
        return self.labels.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.features[rows], self.labels[rows],
                       self.feature_names, self.label_names)


# ---------------------------------------------------------------------------
# ARFF

_ATTR_RE = re.compile(
    r"""^@attribute\s+('(?:[^'\\]|\\.)*'|"(?:[^"\\]|\\.)*"|\S+)\s+(.*)$""",
    re.IGNORECASE)


def _unquote(token: str) -> str:
    token = token.strip()
    if len(token) >= 2 and token[0] == token[-1] and token[0] in "'\"":
        return token[1:-1].replace("\\'", "'").replace('\\"', '"')
    return token


def _parse_attribute(line: str, lineno: int):
    m = _ATTR_RE.match(line)
    if m is None:
        raise ParseError(f"malformed attribute declaration: {line!r}", lineno)
    name = _unquote(m.group(1))
    kind = m.group(2).strip()
    if kind.startswith("{"):
        if not kind.endswith("}"):
            raise ParseError(f"unterminated nominal set for {name!r}", lineno)
        values = {_unquote(v) for v in kind[1:-1].split(",")}
        if not values <= {"0", "1"}:
            raise SchemaError(
                f"line {lineno}: nominal attribute {name!r} is not binary {{0,1}}: {kind}")
        return name, "binary"
    if kind.lower() in _NUMERIC_TYPES:
        return name, "numeric"
    raise SchemaError(f"line {lineno}: unsupported attribute type {kind!r} for {name!r}")


def _to_float(token: str, lineno: int, kinds, col) -> float:
    token = _unquote(token)
    if token == "?" or token == "":
        raise ParseError(f"missing value in column {col}", lineno)
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"non-numeric value {token!r} in column {col}", lineno) from None
    if kinds[col] == "binary" and value not in (0.0, 1.0):
        raise ParseError(f"value {token!r} outside {{0,1}} in column {col}", lineno)
    return value


def _parse_arff(text: str, expect_sparse=None):
    names, kinds = [], []
    rows = []
    in_data = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("%"):
            continue
        if not in_data:
            low = line.lower()
            if low.startswith("@relation"):
                continue
            if low.startswith("@attribute"):
                name, kind = _parse_attribute(line, lineno)
                names.append(name)
                kinds.append(kind)
                continue
            if low.startswith("@data"):
                if not names:
                    raise ParseError("@data before any @attribute", lineno)
                in_data = True
                continue
            if low.startswith("@end"):
                raise SchemaError(f"line {lineno}: relational attributes are not supported")
            raise ParseError(f"unexpected header line: {line!r}", lineno)

        width = len(names)
        if line.startswith("{"):
            if expect_sparse is False:
                raise ParseError("sparse instance in a dense ARFF file", lineno)
            if not line.endswith("}"):
                raise ParseError("unterminated sparse instance", lineno)
            row = np.zeros(width)
            body = line[1:-1].strip()
            if body:
                for item in body.split(","):
                    parts = item.split()
                    if len(parts) != 2:
                        raise ParseError(f"malformed sparse entry {item!r}", lineno)
                    try:
                        idx = int(parts[0])
                    except ValueError:
                        raise ParseError(f"bad sparse index {parts[0]!r}", lineno) from None
                    if not 0 <= idx < width:
                        raise ParseError(f"sparse index {idx} out of range", lineno)
                    row[idx] = _to_float(parts[1], lineno, kinds, idx)
        else:
            if expect_sparse is True:
                raise ParseError("dense instance in a sparse ARFF file", lineno)
            tokens = next(csv.reader([line], skipinitialspace=True, quotechar="'"))
            if len(tokens) != width:
                raise ParseError(f"expected {width} values, found {len(tokens)}", lineno)
            row = np.array([_to_float(t, lineno, kinds, j) for j, t in enumerate(tokens)])
        rows.append(row)
    if not in_data:
        raise ParseError("no @data section found")
    if not rows:
        raise SchemaError("ARFF file contains no instances")
    return names, np.vstack(rows)


def read_mulan_xml(path) -> list[str]:
    """Label names listed in a MULAN label XML file."""
    try:
        tree = ET.parse(path)
    except OSError as exc:
        raise DataIOError(str(exc)) from exc
    except ET.ParseError as exc:
        raise ParseError(f"invalid label XML: {exc}") from exc
    names = [el.get("name") for el in tree.iter() if el.tag.split("}")[-1] == "label"]
    if not names or any(n is None for n in names):
        raise SchemaError(f"no <label name=...> entries in {path}")
    return names


def _resolve_label_columns(columns: list[str], label_spec: LabelSpec) -> list[int]:
    if isinstance(label_spec, (str, os.PathLike)):
        label_spec = read_mulan_xml(label_spec)
    if isinstance(label_spec, (int, np.integer)):
        k = int(label_spec)
        if not 1 <= k < len(columns):
            raise SchemaError(f"label count {k} incompatible with {len(columns)} columns")
        return list(range(len(columns) - k, len(columns)))
    index = {name: j for j, name in enumerate(columns)}
    missing = [name for name in label_spec if name not in index]
    if missing:
        raise SchemaError(f"label columns absent: {missing}")
    return [index[name] for name in label_spec]


def _split_columns(names, table, label_spec) -> Dataset:
    label_cols = _resolve_label_columns(names, label_spec)
    if len(set(label_cols)) != len(label_cols):
        raise SchemaError("duplicate label columns")
    feature_cols = [j for j in range(len(names)) if j not in set(label_cols)]
    if not feature_cols:
        raise SchemaError("no feature columns left after removing labels")
    Y = table[:, label_cols]
    if not np.all((Y == 0) | (Y == 1)):
        bad = [names[j] for j in label_cols if not np.all(np.isin(table[:, j], (0, 1)))]
        raise SchemaError(f"non-binary label columns: {bad}")
    return Dataset(table[:, feature_cols], Y.astype(np.int8),
                   [names[j] for j in feature_cols], [names[j] for j in label_cols])


def _read_text(path) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc


def _parse_csv(text: str):
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty CSV file", 1) from None
    header = [h.strip() for h in header]
    rows = []
    for lineno, record in enumerate(reader, start=2):
        if not record or all(not c.strip() for c in record):
            continue
        if len(record) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(record)}", lineno)
        try:
            rows.append([float(c) for c in record])
        except ValueError:
            raise ParseError(f"non-numeric field in {record!r}", lineno) from None
    if not rows:
        raise SchemaError("CSV file contains no rows")
    table = np.array(rows)
    if not np.all(np.isfinite(table)):
        raise ParseError("missing or non-finite values in CSV")
    return header, table


def load_dataset(path, format: str = "arff", label_spec: LabelSpec = None) -> Dataset:
    """Load a multi-label dataset.

    ``format`` is one of ``arff_dense``, ``arff_sparse``, ``arff`` (either
    instance layout) or ``csv``. ``label_spec`` is an explicit list of label
    column names, an integer ``k`` meaning "the last k columns", or the path
    of a MULAN XML label file.
    """
    if format not in FORMATS:
        raise ArgumentError(f"unknown format {format!r}; expected one of {FORMATS}")
    if label_spec is None:
        raise ArgumentError("label_spec is required")
    text = _read_text(path)
    if format == "csv":
        names, table = _parse_csv(text)
    else:
        sparse = {"arff_dense": False, "arff_sparse": True}.get(format)
        names, table = _parse_arff(text, expect_sparse=sparse)
    return _split_columns(names, table, label_spec)


def _quote(name: str) -> str:
    if re.fullmatch(r"[A-Za-z0-9_.\-]+", name):
        return name
    return "'" + name.replace("\\", "\\\\").replace("'", "\\'") + "'"


def dumps_arff(d: Dataset, relation: str = "dataset") -> str:
    """Dense ARFF text for ``d``; labels are written last as ``{0,1}`` nominals."""
    out = [f"@relation {_quote(relation)}", ""]
    out += [f"@attribute {_quote(n)} numeric" for n in d.feature_names]
    out += [f"@attribute {_quote(n)} {{0,1}}" for n in d.label_names]
    out += ["", "@data"]
    for x, y in zip(d.features, d.labels):
        out.append(",".join([repr(float(v)) for v in x] + [str(int(v)) for v in y]))
    return "\n".join(out) + "\n"


def save_arff(d: Dataset, path, relation: str = "dataset") -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(dumps_arff(d, relation))
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def select_top_labels(d: Dataset, k: int) -> Dataset:
    """Keep the ``k`` most frequent labels (ties keep original column order)."""
    if not 1 <= k <= d.q:
        raise ArgumentError(f"k must be in [1, {d.q}], got {k}")
    counts = d.labels.sum(axis=0)
    order = np.argsort(-counts, kind="stable")[:k]
    return Dataset(d.features, d.labels[:, order], d.feature_names,
                   [d.label_names[j] for j in order])


def random_split(d: Dataset, n_train: int, seed: int) -> tuple[Dataset, Dataset]:
    """Uniform split without replacement into ``n_train`` training rows and the rest."""
    if not 1 <= n_train < d.n:
        raise ArgumentError(f"n_train must be in [1, {d.n - 1}], got {n_train}")
    perm = np.random.default_rng(seed).permutation(d.n)
    train_rows = np.sort(perm[:n_train])
    test_rows = np.sort(perm[n_train:])
    return d.subset(train_rows), d.subset(test_rows)


def concat_datasets(parts: Sequence[Dataset]) -> Dataset:
    """Stack datasets row-wise, e.g. a repository's separate train and test files."""
    if not parts:
        raise ArgumentError("nothing to concatenate")
    first = parts[0]
    for d in parts[1:]:
        if d.feature_names != first.feature_names or d.label_names != first.label_names:
            raise SchemaError("datasets to concatenate must share feature and label columns")
    return Dataset(np.vstack([d.features for d in parts]), np.vstack([d.labels for d in parts]),
                   first.feature_names, first.label_names)
