"""File formats and typed containers shared by the whole pipeline.

Everything here is deterministic: writers emit byte-identical output for
equal inputs (floats via repr = shortest round-trip form, JSON with sorted
keys), and readers reject rather than repair.  Patch bundles are directories
of three files:

    intensity.pgm   P5, maxval 255
    instances.pgm   P5, maxval 65535, 0 = background
    types.csv       header ``instance_id,type_id``
    meta.json       schema_version, slide_id, patch_id, magnification_tag,
                    type_set

Feature matrices are CSV with a ``slide_id,patch_id`` key prefix followed by
the canonical column list from :func:`feature_columns`.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

SCHEMA_VERSION = 1


class IoError(OSError):
    """Filesystem-level failure while reading or writing an artifact."""


class FormatError(ValueError):
    """Well-formedness violation in an on-disk artifact."""


# ---------------------------------------------------------------------------
# nucleus type sets

_CANONICAL_NAMES = ("neoplastic", "inflammatory", "connective", "necrosis",
                    "non_neoplastic_epithelial")

_SLUG_RE = re.compile(r"^[a-z][a-z0-9_]*$")


@dataclass(frozen=True)
class NucleusTypeSet:
    """Ordered nucleus types; index 0 is the anchor (tumor) type that the
    K-function and infiltration features are defined against."""

    names: tuple

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not 2 <= len(names) <= 8:
            raise FormatError(f"type set must have 2..8 types, got {len(names)}")
        if len(set(names)) != len(names):
            raise FormatError("type names must be unique")
        for n in names:
            if not _SLUG_RE.match(n):
                raise FormatError(f"type name {n!r} is not a lowercase slug")

    @property
    def c(self):
        return len(self.names)

    @classmethod
    def default(cls, c=5):
        if c <= len(_CANONICAL_NAMES):
            return cls(_CANONICAL_NAMES[:c])
        extra = tuple(f"type{i}" for i in range(len(_CANONICAL_NAMES), c))
        return cls(_CANONICAL_NAMES + extra)

    def to_json(self):
        return {"c": self.c, "names": list(self.names)}

    @classmethod
    def from_json(cls, obj):
        ts = cls(tuple(obj["names"]))
        if obj.get("c") != ts.c:
            raise FormatError("type_set c does not match its name list")
        return ts


# ---------------------------------------------------------------------------
# canonical feature columns

MORPH_PROPS = ("area", "eccentricity", "roundness", "orientation",
               "intensity_mean", "intensity_std",
               "contrast", "dissimilarity", "homogeneity", "energy")
MORPH_STATS = ("mean", "std", "skewness", "kurtosis")
SNA_PROPS = ("degree", "degree_centrality", "clustering", "closeness")
SNA_STATS = ("mean", "std", "skewness", "kurtosis", "max")
KFN_RADII = (224.0, 448.0, 672.0, 896.0)
BASE_PATCH_SIDE = 1792.0
GLOBAL_HET_NAMES = ("shannon", "simpson", "max_entropy", "richness", "modularity",
                    "kfn_r224", "kfn_r448", "kfn_r672", "kfn_r896")
LOCAL_SKEW_NAMES = ("skew_shannon", "skew_simpson", "skew_max_entropy",
                    "skew_richness")


def feature_columns(types):
    """Ordered column names for the handcrafted feature vector.

    ``types`` is a NucleusTypeSet or a type count (default names).  Length is
    43c + 31: morphometry 40c, counts c, network 20, global heterogeneity 9,
    local heterogeneity 4 + 2(c-1).
    """
    ts = NucleusTypeSet.default(types) if isinstance(types, int) else types
    cols = []
    for name in ts.names:
        for prop in MORPH_PROPS:
            for stat in MORPH_STATS:
                cols.append(f"morph.{name}.{prop}.{stat}")
    for name in ts.names:
        cols.append(f"count.{name}")
    for prop in SNA_PROPS:
        for stat in SNA_STATS:
            cols.append(f"sna.{prop}.{stat}")
    for name in GLOBAL_HET_NAMES:
        cols.append(f"het.global.{name}")
    for name in LOCAL_SKEW_NAMES:
        cols.append(f"het.local.{name}")
    anchor = ts.names[0]
    for other in ts.names[1:]:
        cols.append(f"het.local.mixing_{anchor}_in_{other}")
    for other in ts.names[1:]:
        cols.append(f"het.local.mixing_{other}_in_{anchor}")
    assert len(cols) == 43 * ts.c + 31
    return cols


# ---------------------------------------------------------------------------
# PGM


def write_pgm(path, arr):
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise FormatError("PGM image must be 2-D")
    if arr.dtype == np.uint8:
        maxval = 255
        payload = arr.tobytes()
    elif arr.dtype == np.uint16:
        maxval = 65535
        payload = arr.astype(">u2").tobytes()
    else:
        raise FormatError(f"PGM dtype must be uint8 or uint16, got {arr.dtype}")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header + payload)
    except OSError as e:
        raise IoError(str(e)) from e


def _pgm_tokens(blob):
    # header tokens separated by whitespace, '#' comments run to end of line
    pos = 0
    tokens = []
    while len(tokens) < 4 and pos < len(blob):
        ch = blob[pos:pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            nl = blob.find(b"\n", pos)
            pos = len(blob) if nl < 0 else nl + 1
        else:
            end = pos
            while end < len(blob) and blob[end:end + 1] not in b" \t\r\n":
                end += 1
            tokens.append(blob[pos:end])
            pos = end
    if len(tokens) < 4:
        raise FormatError("truncated PGM header")
    return tokens, pos + 1  # single whitespace byte after maxval


def read_pgm(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise IoError(str(e)) from e
    tokens, offset = _pgm_tokens(blob)
    if tokens[0] != b"P5":
        raise FormatError(f"not a P5 PGM: magic {tokens[0]!r}")
    try:
        w, h, maxval = (int(tokens[i]) for i in (1, 2, 3))
    except ValueError:
        raise FormatError("non-numeric PGM header field") from None
    if w <= 0 or h <= 0:
        raise FormatError("non-positive PGM dimensions")
    if maxval == 255:
        dtype, itemsize = np.uint8, 1
    elif maxval == 65535:
        dtype, itemsize = np.uint16, 2
    else:
        raise FormatError(f"unsupported PGM maxval {maxval}")
    payload = blob[offset:offset + w * h * itemsize]
    if len(payload) != w * h * itemsize:
        raise FormatError("PGM payload size does not match header")
    if maxval == 255:
        arr = np.frombuffer(payload, dtype=np.uint8)
    else:
        arr = np.frombuffer(payload, dtype=">u2").astype(np.uint16)
    return arr.reshape(h, w).copy()


# ---------------------------------------------------------------------------
# patch bundles


@dataclass
class PatchBundle:
    intensity: np.ndarray           # (H, W) uint8
    instances: np.ndarray           # (H, W) uint16, 0 = background
    types: dict                     # instance id -> type index
    slide_id: str
    patch_id: str
    type_set: NucleusTypeSet
    magnification: str = "40x"

    def validate(self):
        if self.intensity.ndim != 2 or self.instances.ndim != 2:
            raise FormatError("bundle images must be 2-D")
        if self.intensity.shape != self.instances.shape:
            raise FormatError(f"image shapes differ: {self.intensity.shape} "
                              f"vs {self.instances.shape}")
        if self.intensity.dtype != np.uint8:
            raise FormatError("intensity must be uint8")
        if self.instances.dtype != np.uint16:
            raise FormatError("instances must be uint16")
        present = set(np.unique(self.instances).tolist()) - {0}
        declared = set(self.types)
        if present - declared:
            raise FormatError(f"instance ids missing from types.csv: "
                              f"{sorted(present - declared)[:5]}")
        if declared - present:
            raise FormatError(f"types.csv lists unknown instance ids: "
                              f"{sorted(declared - present)[:5]}")
        for iid, tid in self.types.items():
            if not 0 <= tid < self.type_set.c:
                raise FormatError(f"instance {iid}: type id {tid} out of range")
        return self


def write_patch_bundle(dirpath, bundle):
    bundle.validate()
    os.makedirs(dirpath, exist_ok=True)
    write_pgm(os.path.join(dirpath, "intensity.pgm"), bundle.intensity)
    write_pgm(os.path.join(dirpath, "instances.pgm"), bundle.instances)
    lines = ["instance_id,type_id"]
    for iid in sorted(bundle.types):
        lines.append(f"{iid},{bundle.types[iid]}")
    _write_text(os.path.join(dirpath, "types.csv"), "\n".join(lines) + "\n")
    meta = {
        "schema_version": SCHEMA_VERSION,
        "slide_id": bundle.slide_id,
        "patch_id": bundle.patch_id,
        "magnification_tag": bundle.magnification,
        "type_set": bundle.type_set.to_json(),
    }
    write_json(os.path.join(dirpath, "meta.json"), meta)


def read_patch_bundle(dirpath):
    intensity = read_pgm(os.path.join(dirpath, "intensity.pgm"))
    instances = read_pgm(os.path.join(dirpath, "instances.pgm"))
    if intensity.dtype != np.uint8:
        raise FormatError("intensity.pgm must be 8-bit")
    if instances.dtype != np.uint16:
        raise FormatError("instances.pgm must be 16-bit")
    meta = read_json(os.path.join(dirpath, "meta.json"))
    for key in ("schema_version", "slide_id", "patch_id", "magnification_tag",
                "type_set"):
        if key not in meta:
            raise FormatError(f"meta.json missing {key!r}")
    if meta["schema_version"] != SCHEMA_VERSION:
        raise FormatError(f"unsupported schema_version {meta['schema_version']}")
    types = _read_types_csv(os.path.join(dirpath, "types.csv"))
    bundle = PatchBundle(
        intensity=intensity,
        instances=instances,
        types=types,
        slide_id=meta["slide_id"],
        patch_id=meta["patch_id"],
        type_set=NucleusTypeSet.from_json(meta["type_set"]),
        magnification=meta["magnification_tag"],
    )
    return bundle.validate()


def _read_types_csv(path):
    text = _read_text(path)
    lines = text.splitlines()
    if not lines or lines[0] != "instance_id,type_id":
        raise FormatError("types.csv header must be 'instance_id,type_id'")
    types = {}
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise FormatError(f"types.csv line {ln}: expected 2 fields")
        try:
            iid, tid = int(parts[0]), int(parts[1])
        except ValueError:
            raise FormatError(f"types.csv line {ln}: non-integer field") from None
        if iid <= 0:
            raise FormatError(f"types.csv line {ln}: instance id must be positive")
        if iid in types:
            raise FormatError(f"types.csv line {ln}: duplicate instance id {iid}")
        types[iid] = tid
    return types


# ---------------------------------------------------------------------------
# feature matrices


@dataclass
class FeatureMatrix:
    columns: tuple                  # feature names, no key columns
    keys: list                      # [(slide_id, patch_id), ...]
    values: np.ndarray              # (n, d) float64

    def __post_init__(self):
        self.columns = tuple(self.columns)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise FormatError("feature values must be 2-D")
        if self.values.shape != (len(self.keys), len(self.columns)):
            raise FormatError(f"feature shape {self.values.shape} does not match "
                              f"{len(self.keys)} keys x {len(self.columns)} columns")
        if len(set(self.keys)) != len(self.keys):
            raise FormatError("duplicate (slide_id, patch_id) keys")
        if not np.all(np.isfinite(self.values)):
            raise FormatError("feature values must be finite")

    def row(self, slide_id, patch_id):
        idx = self.keys.index((slide_id, patch_id))
        return self.values[idx]


def _fmt_float(v):
    return repr(float(v))


def write_feature_matrix(path, fm):
    header = "slide_id,patch_id," + ",".join(fm.columns)
    lines = [header]
    for (sid, pid), row in zip(fm.keys, fm.values):
        lines.append(f"{sid},{pid}," + ",".join(_fmt_float(v) for v in row))
    _write_text(path, "\n".join(lines) + "\n")


def read_feature_matrix(path, expected_columns=None):
    text = _read_text(path)
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty feature matrix file")
    header = lines[0].split(",")
    if header[:2] != ["slide_id", "patch_id"]:
        raise FormatError("feature matrix must start with slide_id,patch_id")
    columns = tuple(header[2:])
    if expected_columns is not None and columns != tuple(expected_columns):
        raise FormatError("feature matrix columns do not match the expected "
                          "canonical order")
    keys, rows = [], []
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(columns) + 2:
            raise FormatError(f"line {ln}: expected {len(columns) + 2} fields, "
                              f"got {len(parts)}")
        keys.append((parts[0], parts[1]))
        try:
            rows.append([float(v) for v in parts[2:]])
        except ValueError:
            raise FormatError(f"line {ln}: non-numeric feature value") from None
    values = np.array(rows, dtype=np.float64) if rows else np.zeros((0, len(columns)))
    return FeatureMatrix(columns=columns, keys=keys, values=values)


# ---------------------------------------------------------------------------
# raw float32 sidecars (deep feature blocks)


def write_array_f32(path, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    try:
        with open(path, "wb") as fh:
            fh.write(arr.tobytes())
    except OSError as e:
        raise IoError(str(e)) from e
    write_json(path + ".json", {"dtype": "<f4", "order": "C",
                                "shape": list(arr.shape)})


def read_array_f32(path):
    header = read_json(path + ".json")
    if header.get("dtype") != "<f4" or header.get("order") != "C":
        raise FormatError("unsupported raw-array header")
    shape = tuple(int(s) for s in header["shape"])
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise IoError(str(e)) from e
    arr = np.frombuffer(blob, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise FormatError("raw-array payload does not match declared shape")
    return arr.reshape(shape).astype(np.float64)


# ---------------------------------------------------------------------------
# json helpers, checkpoints


def dumps_json(obj):
    return json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=True)


def write_json(path, obj):
    _write_text(path, dumps_json(obj) + "\n")


def read_json(path):
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON in {path}: {e}") from e


def _write_text(path, text):
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)
    except OSError as e:
        raise IoError(str(e)) from e


def _read_text(path):
    try:
        with open(path, "r", encoding="ascii") as fh:
            return fh.read()
    except OSError as e:
        raise IoError(str(e)) from e


@dataclass
class Checkpoint:
    params: dict                    # name -> float64 ndarray
    config: dict                    # resolved model + train config snapshot
    seeds: dict                     # named integer seeds
    format_version: int = SCHEMA_VERSION

    def to_json(self):
        return {
            "format_version": self.format_version,
            "config": self.config,
            "seeds": self.seeds,
            "params": {
                name: {"shape": list(arr.shape),
                       "data": [float(v) for v in np.asarray(arr).reshape(-1)]}
                for name, arr in sorted(self.params.items())
            },
        }

    @classmethod
    def from_json(cls, obj):
        for key in ("format_version", "config", "seeds", "params"):
            if key not in obj:
                raise FormatError(f"checkpoint missing {key!r}")
        if obj["format_version"] != SCHEMA_VERSION:
            raise FormatError(f"unsupported checkpoint version "
                              f"{obj['format_version']}")
        params = {}
        for name, spec in obj["params"].items():
            arr = np.array(spec["data"], dtype=np.float64)
            params[name] = arr.reshape(tuple(spec["shape"]))
        return cls(params=params, config=obj["config"], seeds=obj["seeds"],
                   format_version=obj["format_version"])


def save_checkpoint(path, ckpt):
    write_json(path, ckpt.to_json())


def load_checkpoint(path):
    return Checkpoint.from_json(read_json(path))


# ---------------------------------------------------------------------------
# bags and datasets


@dataclass
class Bag:
    slide_id: str
    label: int
    deep: np.ndarray                # (N, D) float64
    path: np.ndarray                # (N, d) float64
    patch_ids: tuple = ()

    def __post_init__(self):
        self.deep = np.asarray(self.deep, dtype=np.float64)
        self.path = np.asarray(self.path, dtype=np.float64)
        if self.deep.ndim != 2 or self.path.ndim != 2:
            raise FormatError("bag feature blocks must be 2-D")
        if self.deep.shape[0] != self.path.shape[0]:
            raise FormatError(f"bag {self.slide_id}: deep rows "
                              f"{self.deep.shape[0]} != path rows {self.path.shape[0]}")
        if self.deep.shape[0] < 1:
            raise FormatError(f"bag {self.slide_id}: empty bag")
        if self.label not in (0, 1):
            raise FormatError(f"bag {self.slide_id}: label must be 0 or 1")
        if not self.patch_ids:
            self.patch_ids = tuple(f"p{i:04d}" for i in range(self.deep.shape[0]))
        if len(self.patch_ids) != self.deep.shape[0]:
            raise FormatError(f"bag {self.slide_id}: patch id count mismatch")

    @property
    def n_patches(self):
        return self.deep.shape[0]


def save_bag_dataset(dirpath, train_bags, test_bags, feature_names=None,
                     extra=None):
    """Write a bag dataset directory: manifest + path CSV + deep sidecars."""
    os.makedirs(dirpath, exist_ok=True)
    os.makedirs(os.path.join(dirpath, "deep"), exist_ok=True)
    all_bags = [("train", b) for b in train_bags] + [("test", b) for b in test_bags]
    if not all_bags:
        raise FormatError("dataset needs at least one bag")
    d = all_bags[0][1].path.shape[1]
    dim = all_bags[0][1].deep.shape[1]
    columns = tuple(feature_names) if feature_names else tuple(
        f"f{i:03d}" for i in range(d))
    keys, rows = [], []
    slides = []
    for split, bag in all_bags:
        if bag.path.shape[1] != d or bag.deep.shape[1] != dim:
            raise FormatError("bags disagree on feature dimensions")
        slides.append({"slide_id": bag.slide_id, "label": bag.label,
                       "split": split, "n_patches": bag.n_patches,
                       "patch_ids": list(bag.patch_ids)})
        for pid, row in zip(bag.patch_ids, bag.path):
            keys.append((bag.slide_id, pid))
            rows.append(row)
        write_array_f32(os.path.join(dirpath, "deep", f"{bag.slide_id}.bin"),
                        bag.deep)
    fm = FeatureMatrix(columns=columns, keys=keys, values=np.array(rows))
    write_feature_matrix(os.path.join(dirpath, "path_features.csv"), fm)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "deep_dim": dim,
        "path_dim": d,
        "columns": list(columns),
        "slides": slides,
    }
    if extra:
        manifest.update(extra)
    write_json(os.path.join(dirpath, "manifest.json"), manifest)


def load_bag_dataset(dirpath):
    """Read a bag dataset directory; returns (train_bags, test_bags, manifest)."""
    manifest = read_json(os.path.join(dirpath, "manifest.json"))
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise FormatError("unsupported dataset schema_version")
    fm = read_feature_matrix(os.path.join(dirpath, "path_features.csv"),
                             expected_columns=manifest["columns"])
    index = {key: i for i, key in enumerate(fm.keys)}
    train, test = [], []
    for slide in manifest["slides"]:
        sid = slide["slide_id"]
        deep = read_array_f32(os.path.join(dirpath, "deep", f"{sid}.bin"))
        if deep.shape[0] != slide["n_patches"]:
            raise FormatError(f"slide {sid}: deep rows != n_patches")
        try:
            rows = [index[(sid, pid)] for pid in slide["patch_ids"]]
        except KeyError as e:
            raise FormatError(f"slide {sid}: missing path row {e}") from None
        bag = Bag(slide_id=sid, label=int(slide["label"]), deep=deep,
                  path=fm.values[rows], patch_ids=tuple(slide["patch_ids"]))
        (train if slide["split"] == "train" else test).append(bag)
    return train, test, manifest


def sha256_of(obj):
    """Stable hash of a JSON-serializable config for manifests."""
    return hashlib.sha256(dumps_json(obj).encode("ascii")).hexdigest()
