"""WSI feature bags, paired reports, dataset manifests and a synthetic corpus.

Feature files (``.hgfeat``) are little-endian::

    magic   6 bytes  b"HGFEAT"
    version uint16   1
    n       uint32   patch count
    d       uint32   feature dimension
    dtype   uint8    1 = float32
    coords  uint8    1 if a coordinate block follows the payload
    payload n*d float32, row-major
    [coords n*2 int32]
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAGIC = b"HGFEAT"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<6sHIIBB")

SPLITS = ("train", "val", "test")


class FeatureFileError(ValueError):
    """Malformed or inconsistent feature file."""


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class PatchFeatureBag:
    wsi_id: str
    features: np.ndarray  # (n, d_in) float32
    coords: Optional[np.ndarray] = None  # (n, 2) int32

    def __post_init__(self):
        f = self.features
        if f.ndim != 2 or f.shape[0] < 1:
            raise DatasetError(f"{self.wsi_id}: features must be a non-empty (n, d) matrix, got {f.shape}")
        bad = ~np.isfinite(f).all(axis=1)
        if bad.any():
            raise DatasetError(f"{self.wsi_id}: non-finite value in row {int(np.argmax(bad))}")
        if self.coords is not None and self.coords.shape != (f.shape[0], 2):
            raise DatasetError(f"{self.wsi_id}: coords shape {self.coords.shape} does not match n={f.shape[0]}")
        f.setflags(write=False)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d_in(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ReportRecord:
    wsi_id: str
    text: str
    token_ids: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if not " ".join(self.text.split()):
            raise DatasetError(f"{self.wsi_id}: empty report")


@dataclass
class ManifestEntry:
    wsi_id: str
    feature_path: str
    report: str
    label: Optional[int] = None
    time: Optional[float] = None
    censored: Optional[bool] = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split: dict[str, str] = field(default_factory=dict)
    root: Path = Path(".")

    def ids(self, split: Optional[str] = None) -> list[str]:
        if split is None:
            return [e.wsi_id for e in self.entries]
        return [e.wsi_id for e in self.entries if self.split.get(e.wsi_id) == split]

    def entry(self, wsi_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.wsi_id == wsi_id:
                return e
        raise KeyError(wsi_id)

    def subset(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if self.split.get(e.wsi_id) == split]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.feature_path)
        return p if p.is_absolute() else self.root / p

    def load_bag(self, entry: ManifestEntry) -> PatchFeatureBag:
        return load_feature_bag(self.resolve(entry), wsi_id=entry.wsi_id)

    def validate(self) -> None:
        """Check report uniqueness, file presence and a constant feature dimension."""
        seen = set()
        dims = set()
        for e in self.entries:
            if e.wsi_id in seen:
                raise DatasetError(f"duplicate wsi_id {e.wsi_id}")
            seen.add(e.wsi_id)
            ReportRecord(e.wsi_id, e.report)
            dims.add(read_header(self.resolve(e))[1])
        if len(dims) > 1:
            raise DatasetError(f"inconsistent feature dimensions {sorted(dims)}")


# ---------------------------------------------------------------- feature files


def write_feature_bag(path: str | Path, bag: PatchFeatureBag) -> None:
    feats = np.ascontiguousarray(bag.features, dtype="<f4")
    n, d = feats.shape
    has_coords = bag.coords is not None
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, d, DTYPE_F32, int(has_coords)))
        fh.write(feats.tobytes(order="C"))
        if has_coords:
            fh.write(np.ascontiguousarray(bag.coords, dtype="<i4").tobytes(order="C"))


def read_header(path: str | Path) -> tuple[int, int, bool]:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    return _parse_header(raw, path)


def _parse_header(raw: bytes, path) -> tuple[int, int, bool]:
    if len(raw) < _HEADER.size:
        raise FeatureFileError(f"{path}: malformed header (file too short)")
    magic, version, n, d, dtype, has_coords = _HEADER.unpack(raw[: _HEADER.size])
    if magic != MAGIC:
        raise FeatureFileError(f"{path}: malformed header (bad magic {magic!r})")
    if version != VERSION:
        raise FeatureFileError(f"{path}: malformed header (unsupported version {version})")
    if dtype != DTYPE_F32:
        raise FeatureFileError(f"{path}: malformed header (unknown dtype tag {dtype})")
    if n < 1 or d < 1 or has_coords not in (0, 1):
        raise FeatureFileError(f"{path}: malformed header (n={n}, d={d}, coords={has_coords})")
    return n, d, bool(has_coords)


def load_feature_bag(path: str | Path, wsi_id: Optional[str] = None) -> PatchFeatureBag:
    path = Path(path)
    raw = path.read_bytes()
    n, d, has_coords = _parse_header(raw, path)
    body = raw[_HEADER.size :]
    row_bytes = 4 * d + (8 if has_coords else 0)
    if len(body) != n * row_bytes:
        if len(body) % row_bytes == 0:
            raise FeatureFileError(
                f"{path}: row count mismatch (header n={n}, payload has {len(body) // row_bytes} rows)"
            )
        raise FeatureFileError(f"{path}: dimension mismatch vs header d={d} ({len(body)} payload bytes)")
    feats = np.frombuffer(body, dtype="<f4", count=n * d).reshape(n, d).astype(np.float32)
    bad = ~np.isfinite(feats).all(axis=1)
    if bad.any():
        raise FeatureFileError(f"{path}: non-finite value in row {int(np.argmax(bad))}")
    coords = None
    if has_coords:
        coords = np.frombuffer(body, dtype="<i4", offset=4 * n * d).reshape(n, 2).astype(np.int32)
    return PatchFeatureBag(wsi_id or path.stem, feats, coords)


# ---------------------------------------------------------------- manifests


def save_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    doc = {
        "entries": [
            {k: v for k, v in vars(e).items() if v is not None} for e in manifest.entries
        ],
        "split": {k: manifest.split[k] for k in sorted(manifest.split)},
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    entries = [ManifestEntry(**e) for e in doc["entries"]]
    return DatasetManifest(entries, dict(doc.get("split", {})), root=path.parent)


def save_reports(path: str | Path, reports: Sequence[ReportRecord]) -> None:
    doc = {r.wsi_id: r.text for r in reports}
    Path(path).write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_reports(path: str | Path) -> list[ReportRecord]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return [ReportRecord(k, v) for k, v in doc.items()]


# ---------------------------------------------------------------- splitting


def largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    """Apportion ``total`` items by ``ratios`` with the largest-remainder rule.

    Ties in the remainder go to the earlier split.
    """
    quotas = [total * r for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    left = total - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:left]:
        sizes[i] += 1
    return sizes


def split_dataset(manifest: DatasetManifest, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetManifest:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"split ratios {ratios} do not sum to 1")
    ids = manifest.ids()
    if len(ids) < len(ratios):
        raise DatasetError(f"{len(ids)} entries cannot fill {len(ratios)} splits")
    sizes = largest_remainder(len(ids), ratios)
    order = np.random.default_rng(seed).permutation(len(ids))
    split = {}
    start = 0
    for name, size in zip(SPLITS, sizes):
        for idx in order[start : start + size]:
            split[ids[idx]] = name
        start += size
    return DatasetManifest(list(manifest.entries), split, manifest.root)


# ---------------------------------------------------------------- synthetic corpus

# Closed vocabulary for synthetic reports; each theme gets a distinct sentence.
_SUBJECTS = [
    "tumor cells", "lymphocytes", "stroma", "necrosis", "glands", "mitoses",
    "fibrosis", "vessels", "nuclei", "mucin", "calcifications", "hemorrhage",
]
_VERBS = ["are", "show", "display", "reveal"]
_DESCRIPTORS = [
    "dense infiltration", "marked atypia", "focal invasion", "clear margins",
    "high grade features", "low grade features", "solid nests", "papillary architecture",
    "chronic inflammation", "extensive sclerosis", "cribriform pattern", "scattered foci",
]
_LOCATIONS = ["in the periphery", "in the center", "near the capsule", "throughout the section"]


def theme_phrase(k: int) -> str:
    subj = _SUBJECTS[k % len(_SUBJECTS)]
    verb = _VERBS[(k // len(_SUBJECTS)) % len(_VERBS)]
    desc = _DESCRIPTORS[(k * 5) % len(_DESCRIPTORS)]
    loc = _LOCATIONS[k % len(_LOCATIONS)]
    return f"{subj} {verb} {desc} {loc} ."


@dataclass(frozen=True)
class Theme:
    center: np.ndarray
    phrase: str


@dataclass
class SyntheticSpec:
    num_wsis: int = 20
    n_range: tuple[int, int] = (64, 256)
    d_in: int = 1024
    num_themes: int = 4
    max_themes_per_wsi: int = 3
    noise_scale: float = 0.5
    center_scale: float = 1.0
    seed: int = 0
    themes: Optional[list[Theme]] = None

    def build_themes(self) -> list[Theme]:
        if self.themes is not None:
            return self.themes
        if self.num_themes > self.d_in:
            raise DatasetError("num_themes must not exceed d_in (centers are orthogonal)")
        rng = np.random.default_rng([self.seed, 1])
        q, _ = np.linalg.qr(rng.standard_normal((self.d_in, self.num_themes)))
        centers = (q.T * self.center_scale * math.sqrt(self.d_in)).astype(np.float32)
        return [Theme(centers[k], theme_phrase(k)) for k in range(self.num_themes)]

    def validate(self) -> None:
        themes = self.build_themes()
        if len(themes) < 2:
            raise DatasetError("synthetic corpus needs at least 2 themes")
        if len({t.phrase for t in themes}) != len(themes):
            raise DatasetError("theme phrases must be pairwise distinct")
        lo, hi = self.n_range
        if lo < 1:
            raise DatasetError(f"n_range minimum must be >= 1, got {lo}")
        if hi < lo:
            raise DatasetError(f"n_range {self.n_range} is empty")


@dataclass(frozen=True)
class SyntheticSample:
    bag: PatchFeatureBag
    report: ReportRecord
    themes: tuple[int, ...]  # primary theme first
    fractions: tuple[float, ...]

    @property
    def primary(self) -> int:
        return self.themes[0]

    def survival_time(self) -> float:
        """Planted event time: decays with the fraction-weighted theme index,
        so its quartiles are fixed by the theme composition."""
        risk = sum(f * t for f, t in zip(self.fractions, self.themes))
        return float(10.0 * math.exp(-risk))


_MIN_MINOR_FRACTION = 0.08


def synth_samples(spec: SyntheticSpec) -> list[SyntheticSample]:
    spec.validate()
    themes = spec.build_themes()
    K = len(themes)
    rng = np.random.default_rng([spec.seed, 2])
    lo, hi = spec.n_range
    out = []
    for i in range(spec.num_wsis):
        n = int(rng.integers(lo, hi + 1))
        k_max = min(spec.max_themes_per_wsi, K, n)
        k = int(rng.integers(1, k_max + 1))
        chosen = [int(t) for t in rng.choice(K, size=k, replace=False)]
        # primary theme holds a strict majority so it is unambiguous
        if k == 1:
            fracs = [1.0]
        else:
            primary = rng.uniform(0.55, 0.75)
            spare = 1.0 - primary - _MIN_MINOR_FRACTION * (k - 1)
            rest = _MIN_MINOR_FRACTION + rng.dirichlet(np.ones(k - 1)) * spare
            fracs = [primary, *rest.tolist()]
        counts = np.maximum(np.floor(np.array(fracs) * n).astype(int), 1)
        counts[0] = n - counts[1:].sum()
        # contiguous spatial blocks per theme, raster order on a square grid
        labels = np.concatenate([np.full(c, t) for c, t in zip(counts, chosen)])
        feats = np.stack([themes[t].center for t in labels]).astype(np.float32)
        if spec.noise_scale > 0:
            feats = feats + rng.normal(0.0, spec.noise_scale, size=feats.shape).astype(np.float32)
        side = int(math.ceil(math.sqrt(n)))
        coords = np.stack([np.arange(n) // side, np.arange(n) % side], axis=1).astype(np.int32)
        wsi_id = f"synth_{i:05d}"
        text = " ".join(themes[t].phrase for t in sorted(chosen))
        bag = PatchFeatureBag(wsi_id, feats, coords)
        realised = tuple(float(c) / n for c in counts)
        out.append(SyntheticSample(bag, ReportRecord(wsi_id, text), tuple(chosen), realised))
    return out


def synth_generate(spec: SyntheticSpec) -> tuple[list[PatchFeatureBag], list[ReportRecord]]:
    samples = synth_samples(spec)
    return [s.bag for s in samples], [s.report for s in samples]


def write_synthetic_corpus(
    out_dir: str | Path,
    spec: SyntheticSpec,
    ratios=(0.8, 0.1, 0.1),
    split_seed: int = 0,
    censor_rate: float = 0.2,
) -> DatasetManifest:
    """Write features, reports.json and manifest.json (with task labels) under ``out_dir``."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    samples = synth_samples(spec)
    rng = np.random.default_rng([spec.seed, 3])
    entries = []
    for s in samples:
        rel = f"features/{s.bag.wsi_id}.hgfeat"
        write_feature_bag(out_dir / rel, s.bag)
        entries.append(
            ManifestEntry(
                wsi_id=s.bag.wsi_id,
                feature_path=rel,
                report=s.report.text,
                label=s.primary,
                time=round(s.survival_time(), 6),
                censored=bool(rng.random() < censor_rate),
            )
        )
    manifest = split_dataset(DatasetManifest(entries, root=out_dir), ratios, split_seed)
    save_manifest(out_dir / "manifest.json", manifest)
    save_reports(out_dir / "reports.json", [s.report for s in samples])
    return manifest
