"""Corpus acquisition and cleaning: fetch, validate, hash, deduplicate, account, split.

Records carry paths relative to the corpus root (``flood/0001.jpg``) so that
manifests are portable and the survivor rule (smallest path wins) does not
depend on where the corpus is mounted.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from urllib.parse import urlparse

import numpy as np
import requests

from .errors import DataError
from .images import (
    DecodeError,
    compute_phash,
    decode_image,
    luma,
    max_distance,
    resize_bilinear,
    validate_image,
)
from .labels import ClassLabel

log = logging.getLogger(__name__)

STATUSES = ("pending", "valid", "corrupt", "duplicate_removed", "fetch_failed", "excluded")
DEFAULT_THRESHOLD = 0.75


@dataclass
class ImageRecord:
    path: str
    class_label: ClassLabel
    byte_size: int = 0
    format: str | None = None
    phash: int | None = None
    status: str = "pending"
    reason: str | None = None
    url: str | None = None

    def to_json(self) -> dict:
        return {
            "path": self.path,
            "class_label": self.class_label.folder,
            "byte_size": self.byte_size,
            "format": self.format,
            "phash": None if self.phash is None else f"{self.phash:016x}",
            "status": self.status,
            "reason": self.reason,
            "url": self.url,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ImageRecord":
        return cls(
            path=doc["path"],
            class_label=ClassLabel.parse(doc["class_label"]),
            byte_size=int(doc.get("byte_size", 0)),
            format=doc.get("format"),
            phash=None if doc.get("phash") is None else int(doc["phash"], 16),
            status=doc["status"],
            reason=doc.get("reason"),
            url=doc.get("url"),
        )


@dataclass
class DatasetManifest:
    root: str = ""
    records: dict = field(default_factory=lambda: {label: [] for label in ClassLabel})

    def all_records(self):
        for label in ClassLabel:
            yield from self.records[label]

    def status_counts(self, label: ClassLabel) -> Counter:
        return Counter(r.status for r in self.records[label])

    def before(self, label: ClassLabel) -> int:
        return len(self.records[label])

    def after(self, label: ClassLabel) -> int:
        return self.status_counts(label)["valid"]

    @property
    def total_before(self) -> int:
        return sum(self.before(label) for label in ClassLabel)

    @property
    def total_after(self) -> int:
        return sum(self.after(label) for label in ClassLabel)

    def valid_records(self, label: ClassLabel | None = None):
        labels = ClassLabel if label is None else (label,)
        return [r for lab in labels for r in self.records[lab] if r.status == "valid"]

    def summary(self) -> dict:
        classes = {}
        for label in ClassLabel:
            counts = self.status_counts(label)
            classes[label.folder] = {
                "before": self.before(label),
                "after": self.after(label),
                **{s: counts.get(s, 0) for s in STATUSES if s not in ("pending", "valid")},
            }
        return {
            "root": self.root,
            "classes": classes,
            "total_before": self.total_before,
            "total_after": self.total_after,
        }


# ------------------------------------------------------------------- fetching


def _target_name(url: str) -> str:
    suffix = Path(urlparse(url).path).suffix.lower()
    if suffix not in (".jpg", ".jpeg", ".png"):
        suffix = ".img"
    return hashlib.sha1(url.encode("utf-8")).hexdigest()[:16] + suffix


def fetch_urls(url_list, dest_dir, class_label, timeout=10.0, workers=4, session=None):
    """Download each URL into ``dest_dir``; failures become ``fetch_failed`` records.

    Duplicate URLs are fetched once. Only an unwritable destination aborts
    the batch. Results follow first-occurrence URL order.
    """
    label = ClassLabel.parse(class_label)
    dest = Path(dest_dir)
    dest.mkdir(parents=True, exist_ok=True)
    if not os.access(dest, os.W_OK):
        raise PermissionError(f"destination {dest} is not writable")
    urls = list(dict.fromkeys(u.strip() for u in url_list if u and u.strip()))
    session = session or requests.Session()

    def fetch_one(url):
        target = dest / _target_name(url)
        rel = f"{label.folder}/{target.name}"
        try:
            resp = session.get(url, timeout=timeout)
            if resp.status_code != 200:
                return ImageRecord(rel, label, status="fetch_failed",
                                   reason=f"HTTP {resp.status_code}", url=url)
            content = resp.content
        except requests.RequestException as exc:
            return ImageRecord(rel, label, status="fetch_failed",
                               reason=type(exc).__name__, url=url)
        target.write_bytes(content)
        return ImageRecord(rel, label, byte_size=len(content), status="pending", url=url)

    if not urls:
        return []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(fetch_one, urls))


def read_url_list(path) -> list[str]:
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip() and not line.startswith("#")]


def write_fetch_log(records, path):
    with open(path, "a") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


# ----------------------------------------------------------------- cleaning


def inspect_file(path: Path, rel: str, label: ClassLabel) -> ImageRecord:
    """Validate and hash one file."""
    data = path.read_bytes()
    record = ImageRecord(rel, label, byte_size=len(data))
    check = validate_image(data)
    if not check.ok:
        record.status, record.reason = "corrupt", check.reason
        return record
    try:
        record.phash = compute_phash(luma(decode_image(data)))
    except DecodeError as exc:
        record.status, record.reason = "corrupt", str(exc)
        return record
    record.format, record.status = check.format, "valid"
    return record


def _groups(hashes: list[int], limit: int) -> list[int]:
    """Union-find over all pairs within ``limit`` bits; returns a root per item."""
    parent = list(range(len(hashes)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    arr = np.array(hashes, dtype=np.uint64)
    for i in range(len(arr) - 1):
        dist = np.bitwise_count(arr[i + 1 :] ^ arr[i])
        for j in np.flatnonzero(dist <= limit):
            a, b = find(i), find(i + 1 + int(j))
            if a != b:
                parent[max(a, b)] = min(a, b)
    return [find(i) for i in range(len(arr))]


def dedup_manifest(manifest: DatasetManifest, similarity_threshold=DEFAULT_THRESHOLD):
    """Flag near-duplicates within each class; returns a new manifest.

    Records whose hashes are at least ``similarity_threshold`` similar are
    joined transitively; each group keeps its lexicographically smallest
    path as ``valid`` and marks the rest ``duplicate_removed``.
    """
    limit = max_distance(similarity_threshold)
    out = DatasetManifest(manifest.root)
    for label in ClassLabel:
        records = sorted((replace(r) for r in manifest.records[label]), key=lambda r: r.path)
        hashed = [r for r in records if r.status in ("valid", "duplicate_removed")]
        for r in hashed:
            if r.phash is None:
                raise DataError(f"record {r.path} has no perceptual hash")
        roots = _groups([r.phash for r in hashed], limit)
        survivor = {}
        for r, root in zip(hashed, roots):
            survivor.setdefault(root, r.path)  # records are path-sorted
        for r, root in zip(hashed, roots):
            if survivor[root] == r.path:
                r.status, r.reason = "valid", None
            else:
                r.status, r.reason = "duplicate_removed", f"duplicate of {survivor[root]}"
        out.records[label] = records
    return out


def read_exclusions(path) -> set[str]:
    with open(path) as fh:
        return {line.strip() for line in fh if line.strip() and not line.startswith("#")}


def _relative(root: Path, entry: str) -> str:
    p = Path(entry)
    if p.is_absolute():
        try:
            return p.relative_to(root).as_posix()
        except ValueError:
            return p.as_posix()
    return p.as_posix()


def ingest_folders(root, exclusions=(), fetch_failures=(), similarity_threshold=DEFAULT_THRESHOLD,
                   workers=1):
    """Validate, hash, deduplicate and account every file under ``root/<class>/``.

    ``exclusions`` lists paths (relative to ``root`` or absolute) removed by
    hand; they are counted in the before column only. ``fetch_failures`` are
    ``fetch_failed`` records to fold into the accounting.
    """
    root = Path(root)
    missing = [label.folder for label in ClassLabel if not (root / label.folder).is_dir()]
    if missing:
        raise DataError(f"missing class folder(s) under {root}: {', '.join(missing)}")
    excluded = {_relative(root, e) for e in exclusions}
    manifest = DatasetManifest(str(root))
    jobs = []
    for label in ClassLabel:
        for path in sorted((root / label.folder).iterdir()):
            if path.is_file() and not path.name.startswith("."):
                jobs.append((path, path.relative_to(root).as_posix(), label))

    def run(job):
        path, rel, label = job
        if rel in excluded:
            return ImageRecord(rel, label, byte_size=path.stat().st_size, status="excluded",
                               reason="manual exclusion")
        return inspect_file(path, rel, label)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    for record in results:
        manifest.records[record.class_label].append(record)
    for record in fetch_failures:
        if record.status == "fetch_failed":
            manifest.records[record.class_label].append(replace(record))
    return dedup_manifest(manifest, similarity_threshold)


# ------------------------------------------------------------------ manifest IO


def write_manifest(manifest: DatasetManifest, path):
    with open(path, "w") as fh:
        for record in manifest.all_records():
            fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
        fh.write(json.dumps({"summary": manifest.summary()}, sort_keys=True) + "\n")


def read_manifest(path) -> DatasetManifest:
    manifest = DatasetManifest()
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            if "summary" in doc:
                manifest.root = doc["summary"].get("root", "")
                continue
            record = ImageRecord.from_json(doc)
            manifest.records[record.class_label].append(record)
    return manifest


def read_records_jsonl(path) -> list[ImageRecord]:
    with open(path) as fh:
        return [ImageRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def cleaning_rows(manifest: DatasetManifest):
    rows = [(label.title, manifest.before(label), manifest.after(label)) for label in ClassLabel]
    rows.append(("Total", manifest.total_before, manifest.total_after))
    return rows


def render_cleaning_table(manifest: DatasetManifest) -> str:
    """Before/after image counts per class with a closing Total row."""
    lines = [f"{'Disaster':<12}{'Before':>8}{'After':>8}"]
    for name, before, after in cleaning_rows(manifest):
        lines.append(f"{name:<12}{before:>8}{after:>8}")
    return "\n".join(lines) + "\n"


def cleaning_csv(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Disaster", "Before", "After"])
    writer.writerows(cleaning_rows(manifest))
    return buf.getvalue()


# --------------------------------------------------------------------- split


@dataclass
class SplitAssignment:
    assignment: dict  # path -> "train" | "test"
    train_fraction: float = 0.8
    seed: int = 0

    def paths(self, which: str) -> list[str]:
        return sorted(p for p, side in self.assignment.items() if side == which)

    def to_json(self) -> str:
        doc = {"train_fraction": self.train_fraction, "seed": self.seed,
               "assignment": dict(sorted(self.assignment.items()))}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitAssignment":
        doc = json.loads(text)
        return cls(doc["assignment"], doc["train_fraction"], doc["seed"])


def train_count(n: int, train_fraction: float) -> int:
    return int(np.floor(train_fraction * n + 0.5))


def stratified_split(manifest: DatasetManifest, train_fraction=0.8, seed=0) -> SplitAssignment:
    """Per-class seeded shuffle, then the first round(fraction * n) go to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    assignment = {}
    for label in ClassLabel:
        records = sorted(manifest.valid_records(label), key=lambda r: r.path)
        if not records:
            raise DataError(f"class {label.folder} has no valid records to split")
        order = np.random.default_rng([seed, int(label)]).permutation(len(records))
        cut = train_count(len(records), train_fraction)
        for rank, i in enumerate(order):
            assignment[records[i].path] = "train" if rank < cut else "test"
    return SplitAssignment(assignment, train_fraction, seed)


# -------------------------------------------------------------------- decode


def decode_and_resize(record: ImageRecord, target: int, root=None) -> np.ndarray:
    """Load a valid record as a (target, target, 3) float32 array in [0, 1]."""
    path = Path(root) / record.path if root is not None else Path(record.path)
    try:
        rgb = decode_image(path.read_bytes())
    except DecodeError:
        record.status, record.reason = "corrupt", "decode failed at load time"
        raise
    if rgb.shape[:2] != (target, target):
        rgb = resize_bilinear(rgb, target, target)
    return (np.asarray(rgb, dtype=np.float32) / np.float32(255.0)).astype(np.float32)


def load_arrays(records, target: int, root=None):
    """Stack records into ``(images, labels)`` arrays."""
    images = np.empty((len(records), target, target, 3), dtype=np.float32)
    labels = np.empty(len(records), dtype=np.int64)
    for i, record in enumerate(records):
        images[i] = decode_and_resize(record, target, root)
        labels[i] = int(record.class_label)
    return images, labels
