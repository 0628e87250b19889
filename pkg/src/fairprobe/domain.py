"""Annotation tables, comparison stores and their on-disk formats.

Templates are addressed by a dense 0-based ``template_id`` that equals the
row position in the annotation CSV. Comparisons only ever pair templates of
the same gender.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

MALE = 0
FEMALE = 1
GENDERS = (MALE, FEMALE)
GENDER_NAMES = {MALE: "male", FEMALE: "female"}
GENDER_CODES = {"M": MALE, "F": FEMALE}

IMPOSTOR = 0
GENUINE = 1

EMBEDDING_MAGIC = b"FPEM"
COMPARISON_MAGIC = b"FPCM"
FORMAT_VERSION = 1
HASH_SIZE = 32

COMPARISON_RECORD = np.dtype(
    [("idx_a", "<u8"), ("idx_b", "<u8"), ("score", "<f8"), ("kind", "u1"), ("gender", "u1")]
)


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


class InsufficientSamples(DataError):
    """The data cannot satisfy the sampling lower bounds."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class AnnotationTable:
    """Ternary attribute annotations plus gender and identity per template.

    ``labels`` has shape (n_templates, n_attributes) with values in {-1, 0, 1}.
    Identities are interned: ``identity_codes[i]`` indexes ``identities``.
    """

    attribute_names: tuple
    identities: tuple
    identity_codes: np.ndarray
    gender: np.ndarray
    labels: np.ndarray
    embeddings: Optional[np.ndarray] = None

    def __post_init__(self):
        names = tuple(self.attribute_names)
        object.__setattr__(self, "attribute_names", names)
        if len(set(names)) != len(names):
            raise DataError("attribute names must be unique")
        labels = np.asarray(self.labels, dtype=np.int8)
        if labels.ndim != 2 or labels.shape[1] != len(names):
            raise DataError(
                f"label matrix shape {labels.shape} does not match {len(names)} attributes"
            )
        if labels.size and not np.isin(labels, (-1, 0, 1)).all():
            raise DataError("labels must be in {-1, 0, 1}")
        n = labels.shape[0]
        codes = np.asarray(self.identity_codes, dtype=np.int64)
        gender = np.asarray(self.gender, dtype=np.uint8)
        if codes.shape != (n,) or gender.shape != (n,):
            raise DataError("identity and gender columns must have one entry per template")
        if n and (codes.min() < 0 or codes.max() >= len(self.identities)):
            raise DataError("identity code out of range")
        if n and gender.max() > FEMALE:
            raise DataError("gender must be M or F")
        object.__setattr__(self, "labels", _readonly(labels))
        object.__setattr__(self, "identity_codes", _readonly(codes))
        object.__setattr__(self, "gender", _readonly(gender))
        object.__setattr__(self, "identities", tuple(self.identities))
        if self.embeddings is not None:
            emb = np.asarray(self.embeddings, dtype=np.float32)
            if emb.ndim != 2 or emb.shape[0] != n:
                raise DataError("embedding matrix must have one row per template")
            object.__setattr__(self, "embeddings", _readonly(emb))

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_attributes(self) -> int:
        return len(self.attribute_names)

    def attribute_index(self, name: str) -> int:
        try:
            return self.attribute_names.index(name)
        except ValueError:
            raise KeyError(f"unknown attribute {name!r}") from None

    def column(self, name: str) -> np.ndarray:
        return self.labels[:, self.attribute_index(name)]

    def with_embeddings(self, embeddings: np.ndarray) -> "AnnotationTable":
        return AnnotationTable(
            self.attribute_names, self.identities, self.identity_codes,
            self.gender, self.labels, embeddings,
        )

    def with_labels(self, labels: np.ndarray, attribute_names: Sequence[str]) -> "AnnotationTable":
        return AnnotationTable(
            tuple(attribute_names), self.identities, self.identity_codes,
            self.gender, labels, self.embeddings,
        )


def load_annotations(path) -> AnnotationTable:
    """Read and validate an annotation CSV.

    The header is ``template_id,identity_id,gender,<attr_1>,...,<attr_K>``.
    Errors name the 1-based file line of the first offending row.
    """
    path = Path(path)
    try:
        df = pd.read_csv(
            path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8"
        )
    except FileNotFoundError:
        raise
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: empty file") from None

    head = list(df.columns)
    if head[:3] != ["template_id", "identity_id", "gender"]:
        raise DataError(f"{path}: header must start with template_id,identity_id,gender")
    attrs = head[3:]
    if not attrs:
        raise DataError(f"{path}: no attribute columns")
    if len(set(attrs)) != len(attrs) or any(a.startswith("Unnamed:") for a in attrs):
        raise DataError(f"{path}: attribute names must be unique and non-empty")

    def line_of(row) -> int:
        return int(row) + 2  # header is line 1

    tid = pd.to_numeric(df["template_id"], errors="coerce")
    bad = tid.isna() | (tid % 1 != 0) | (tid < 0)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"{path}: line {line_of(row)}: invalid template_id")
    tid = tid.to_numpy(dtype=np.int64)
    dup = pd.Series(tid).duplicated().to_numpy()
    if dup.any():
        row = int(np.flatnonzero(dup)[0])
        raise DataError(f"{path}: line {line_of(row)}: duplicate template_id {tid[row]}")
    out_of_order = tid != np.arange(len(tid))
    if out_of_order.any():
        row = int(np.flatnonzero(out_of_order)[0])
        raise DataError(
            f"{path}: line {line_of(row)}: template_id must equal the 0-based row index"
        )

    g = df["gender"].map(GENDER_CODES)
    if g.isna().any():
        row = int(np.flatnonzero(g.isna().to_numpy())[0])
        raise DataError(f"{path}: line {line_of(row)}: gender must be M or F")

    labels = np.empty((len(df), len(attrs)), dtype=np.int8)
    for k, name in enumerate(attrs):
        col = df[name]
        ok = col.isin(("-1", "0", "1"))
        if not ok.all():
            row = int(np.flatnonzero(~ok.to_numpy())[0])
            raise DataError(
                f"{path}: line {line_of(row)}: label {col.iloc[row]!r} for {name!r} "
                "is not in {-1, 0, 1}"
            )
        labels[:, k] = col.to_numpy().astype(np.int8)

    codes, uniques = pd.factorize(df["identity_id"], sort=False)
    return AnnotationTable(
        attribute_names=tuple(attrs),
        identities=tuple(uniques),
        identity_codes=codes,
        gender=g.to_numpy(dtype=np.uint8),
        labels=labels,
    )


def save_annotations(table: AnnotationTable, path) -> None:
    inv = {v: k for k, v in GENDER_CODES.items()}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(["template_id", "identity_id", "gender", *table.attribute_names]))
        fh.write("\n")
        ident = table.identities
        for i in range(len(table)):
            row = [str(i), ident[table.identity_codes[i]], inv[int(table.gender[i])]]
            row.extend(str(int(v)) for v in table.labels[i])
            fh.write(",".join(row))
            fh.write("\n")


# -- embeddings ---------------------------------------------------------------

def save_embeddings(path, template_ids, vectors) -> None:
    vectors = np.asarray(vectors, dtype="<f4")
    ids = np.asarray(template_ids, dtype="<u8")
    count, dim = vectors.shape
    rec = np.empty(count, dtype=[("tid", "<u8"), ("vec", "<f4", (dim,))])
    rec["tid"] = ids
    rec["vec"] = vectors
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC + struct.pack("<III", FORMAT_VERSION, count, dim))
        fh.write(rec.tobytes())


def load_embeddings(path):
    """Return ``(template_ids, vectors)`` from an ``FPEM`` embedding file."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != EMBEDDING_MAGIC:
        raise DataError(f"{path}: not an embedding file")
    version, count, dim = struct.unpack_from("<III", data, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported embedding format version {version}")
    rec_dtype = np.dtype([("tid", "<u8"), ("vec", "<f4", (dim,))])
    if len(data) != 16 + count * rec_dtype.itemsize:
        raise DataError(f"{path}: size does not match header (count={count}, dim={dim})")
    rec = np.frombuffer(data, dtype=rec_dtype, offset=16, count=count)
    return rec["tid"].astype(np.int64), rec["vec"].astype(np.float32)


def attach_embeddings(table: AnnotationTable, path) -> AnnotationTable:
    ids, vecs = load_embeddings(path)
    n = len(table)
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise DataError(f"{path}: embedding references unknown template_id")
    if np.unique(ids).size != ids.size:
        raise DataError(f"{path}: duplicate template_id in embedding file")
    if ids.size != n:
        missing = np.setdiff1d(np.arange(n), ids)
        raise DataError(f"{path}: missing embedding for template_id {int(missing[0])}")
    out = np.empty((n, vecs.shape[1]), dtype=np.float32)
    out[ids] = vecs
    return table.with_embeddings(out)


# -- comparisons --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ComparisonStore:
    """Columnar same-gender comparisons with a content fingerprint."""

    idx_a: np.ndarray
    idx_b: np.ndarray
    score: np.ndarray
    kind: np.ndarray
    gender: np.ndarray
    _fingerprint: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        cols = {
            "idx_a": np.int64, "idx_b": np.int64, "score": np.float64,
            "kind": np.uint8, "gender": np.uint8,
        }
        n = None
        for name, dtype in cols.items():
            a = _readonly(np.asarray(getattr(self, name), dtype=dtype))
            if a.ndim != 1 or (n is not None and a.shape[0] != n):
                raise DataError("comparison columns must be 1-d and equally long")
            n = a.shape[0]
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return self.score.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ComparisonStore):
            return NotImplemented
        return self.fingerprint == other.fingerprint

    __hash__ = None

    def records(self) -> np.ndarray:
        rec = np.empty(len(self), dtype=COMPARISON_RECORD)
        rec["idx_a"] = self.idx_a
        rec["idx_b"] = self.idx_b
        rec["score"] = self.score
        rec["kind"] = self.kind
        rec["gender"] = self.gender
        return rec

    def body_bytes(self) -> bytes:
        head = COMPARISON_MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(self))
        return head + self.records().tobytes()

    @property
    def fingerprint(self) -> str:
        """SHA-256 hex digest of the serialized comparisons."""
        if not self._fingerprint:
            self._fingerprint.append(hashlib.sha256(self.body_bytes()).hexdigest())
        return self._fingerprint[0]

    @property
    def genuine_count(self) -> int:
        return int(np.count_nonzero(self.kind == GENUINE))

    def subset(self, mask) -> "ComparisonStore":
        return ComparisonStore(
            self.idx_a[mask], self.idx_b[mask], self.score[mask],
            self.kind[mask], self.gender[mask],
        )

    def validate(self, table: AnnotationTable) -> None:
        """Check referential integrity and the same-gender/kind invariants."""
        n = len(table)
        if len(self) == 0:
            return
        for col in (self.idx_a, self.idx_b):
            if col.min() < 0 or col.max() >= n:
                bad = int(np.flatnonzero((col < 0) | (col >= n))[0])
                raise DataError(f"comparison {bad} references unknown template_id {int(col[bad])}")
        if np.any(self.idx_a == self.idx_b):
            bad = int(np.flatnonzero(self.idx_a == self.idx_b)[0])
            raise DataError(f"comparison {bad} pairs a template with itself")
        ga, gb = table.gender[self.idx_a], table.gender[self.idx_b]
        wrong = (ga != gb) | (ga != self.gender)
        if wrong.any():
            bad = int(np.flatnonzero(wrong)[0])
            raise DataError(f"comparison {bad} is not a same-gender pair of the stated gender")
        same = table.identity_codes[self.idx_a] == table.identity_codes[self.idx_b]
        wrong = same != (self.kind == GENUINE)
        if wrong.any():
            bad = int(np.flatnonzero(wrong)[0])
            raise DataError(f"comparison {bad} has a kind inconsistent with identities")


def save_comparisons(store: ComparisonStore, path, sidecar: bool = False) -> None:
    body = store.body_bytes()
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(digest)
    if sidecar:
        Path(str(path) + ".sha256").write_text(digest.hex() + "\n", encoding="utf-8")


def load_comparisons(path, table: Optional[AnnotationTable] = None) -> ComparisonStore:
    """Read an ``FPCM`` comparison file.

    The trailing content hash is verified, as is a ``<path>.sha256`` sidecar
    when present. With ``table`` given, every comparison is also checked
    against it (see :meth:`ComparisonStore.validate`).
    """
    data = Path(path).read_bytes()
    if len(data) < 16 + HASH_SIZE or data[:4] != COMPARISON_MAGIC:
        raise DataError(f"{path}: not a comparison file")
    version, count = struct.unpack_from("<IQ", data, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported comparison format version {version}")
    expected = 16 + count * COMPARISON_RECORD.itemsize + HASH_SIZE
    if len(data) != expected:
        raise DataError(f"{path}: size {len(data)} does not match header count {count}")
    body, digest = data[:-HASH_SIZE], data[-HASH_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise DataError(f"{path}: content hash mismatch")
    side = Path(str(path) + ".sha256")
    if side.exists():
        if side.read_text(encoding="utf-8").strip() != digest.hex():
            raise DataError(f"{path}: fingerprint does not match sidecar {side.name}")
    rec = np.frombuffer(body, dtype=COMPARISON_RECORD, offset=16, count=count)
    if count and (rec["kind"].max() > GENUINE or rec["gender"].max() > FEMALE):
        raise DataError(f"{path}: kind/gender code out of range")
    store = ComparisonStore(
        rec["idx_a"].astype(np.int64), rec["idx_b"].astype(np.int64),
        rec["score"].copy(), rec["kind"].copy(), rec["gender"].copy(),
    )
    store._fingerprint.append(digest.hex())
    if table is not None:
        store.validate(table)
    return store


@dataclass(frozen=True)
class ComparisonPolicy:
    """How many pairs :func:`generate_comparisons` emits.

    ``max_genuine_per_identity=None`` keeps every genuine pair. Impostors are
    drawn uniformly per gender, at most ``impostor_factor`` times that
    gender's genuine count (and at most ``max_impostors_per_gender``).
    """

    max_genuine_per_identity: Optional[int] = None
    impostor_factor: float = 20.0
    max_impostors_per_gender: Optional[int] = None
    seed: int = 0


def genuine_pairs(members: np.ndarray, identity_codes: np.ndarray,
                  cap: Optional[int] = None, rng=None):
    """All within-identity pairs ``(a, b)`` with ``a < b`` among ``members``.

    ``members`` must be sorted ascending. With ``cap`` set, each identity
    keeps a uniform sample of at most ``cap`` pairs.
    """
    members = np.asarray(members, dtype=np.int64)
    ident = identity_codes[members]
    order = np.argsort(ident, kind="stable")
    members, ident = members[order], ident[order]
    bounds = np.flatnonzero(np.diff(ident)) + 1
    starts = np.concatenate(([0], bounds))
    stops = np.concatenate((bounds, [members.size]))
    out_a, out_b = [], []
    tri = {}
    for s, e in zip(starts, stops):
        m = e - s
        if m < 2:
            continue
        if m not in tri:
            tri[m] = np.triu_indices(m, 1)
        i, j = tri[m]
        a, b = members[s + i], members[s + j]
        if cap is not None and a.size > cap:
            pick = np.sort(rng.choice(a.size, size=cap, replace=False))
            a, b = a[pick], b[pick]
        out_a.append(a)
        out_b.append(b)
    if not out_a:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    a = np.concatenate(out_a)
    b = np.concatenate(out_b)
    order = np.lexsort((b, a))
    return a[order], b[order]


def impostor_pairs(members: np.ndarray, identity_codes: np.ndarray, count: int, rng):
    """Uniformly sample ``count`` distinct cross-identity pairs among ``members``.

    Pairs are returned as ``(a, b)`` with ``a < b``, sorted. If fewer pairs
    exist, all of them are returned.
    """
    members = np.sort(np.asarray(members, dtype=np.int64))
    n = members.size
    ident = identity_codes[members]
    _, sizes = np.unique(ident, return_counts=True)
    available = n * (n - 1) // 2 - int(np.sum(sizes * (sizes - 1) // 2))
    count = int(min(count, available))
    if count <= 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    if count * 2 >= available:
        i, j = np.triu_indices(n, 1)
        keep = ident[i] != ident[j]
        codes = i[keep].astype(np.int64) * n + j[keep]
        if count < codes.size:
            codes = np.sort(rng.choice(codes, size=count, replace=False))
    else:
        codes = np.empty(0, np.int64)
        while codes.size < count:
            batch = 2 * (count - codes.size) + 1024
            i = rng.integers(0, n, batch)
            j = rng.integers(0, n, batch)
            keep = (i != j) & (ident[i] != ident[j])
            lo = np.minimum(i[keep], j[keep])
            hi = np.maximum(i[keep], j[keep])
            merged = np.concatenate((codes, lo * n + hi))
            _, first = np.unique(merged, return_index=True)
            codes = merged[np.sort(first)]
        codes = np.sort(codes[:count])
    return members[codes // n], members[codes % n]


def cosine_scores(embeddings: np.ndarray, a: np.ndarray, b: np.ndarray,
                  chunk: int = 1 << 18) -> np.ndarray:
    emb = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms == 0):
        raise DataError("zero-length embedding; cosine similarity undefined")
    out = np.empty(a.size, dtype=np.float64)
    for s in range(0, a.size, chunk):
        aa, bb = a[s:s + chunk], b[s:s + chunk]
        dots = np.einsum("ij,ij->i", emb[aa], emb[bb])
        out[s:s + chunk] = dots / (norms[aa] * norms[bb])
    return np.clip(out, -1.0, 1.0)


def generate_comparisons(table: AnnotationTable, policy: ComparisonPolicy = ComparisonPolicy()
                         ) -> ComparisonStore:
    """Build same-gender genuine and impostor comparisons scored by cosine similarity."""
    if table.embeddings is None:
        raise DataError("every template needs an embedding to generate comparisons")
    if not np.all(np.isfinite(table.embeddings)):
        raise DataError("embeddings contain non-finite values")
    seq = np.random.SeedSequence(policy.seed)
    cols = {k: [] for k in ("a", "b", "kind", "gender")}
    for g, child in zip(GENDERS, seq.spawn(len(GENDERS))):
        rng_gen, rng_imp = (np.random.default_rng(s) for s in child.spawn(2))
        members = np.flatnonzero(table.gender == g)
        # a gender with a single identity simply has no impostor pairs
        ga, gb = genuine_pairs(members, table.identity_codes,
                               policy.max_genuine_per_identity, rng_gen)
        target = int(np.floor(policy.impostor_factor * ga.size))
        if policy.max_impostors_per_gender is not None:
            target = min(target, policy.max_impostors_per_gender)
        ia, ib = impostor_pairs(members, table.identity_codes, max(target, 1), rng_imp)
        for a, b, kind in ((ga, gb, GENUINE), (ia, ib, IMPOSTOR)):
            cols["a"].append(a)
            cols["b"].append(b)
            cols["kind"].append(np.full(a.size, kind, np.uint8))
            cols["gender"].append(np.full(a.size, g, np.uint8))
    a = np.concatenate(cols["a"])
    b = np.concatenate(cols["b"])
    return ComparisonStore(
        a, b, cosine_scores(table.embeddings, a, b),
        np.concatenate(cols["kind"]), np.concatenate(cols["gender"]),
    )
