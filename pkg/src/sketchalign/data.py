"""Dataset manifests, raster IO, and the synthetic desk-scale corpus.

The synthetic generator draws parametric glyph families ("images": filled,
colored, textured background; "sketches": jittered outlines on white) and
emits a canned per-category text corpus so the whole pipeline can run
hermetically. Everything is a pure function of the seed.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .config import SyntheticConfig

MANIFEST_VERSION = 1
_GRID_MAGIC = b"SKAGRID1"


class ManifestError(ValueError):
    """Raised when a manifest violates its invariants."""


@dataclass
class RasterInstance:
    pixels: np.ndarray  # (h, w, c) float64 in [0, 1]
    modality: str       # "sketch" | "image"
    category_label: int
    instance_id: str
    category: str = ""


@dataclass(frozen=True)
class ManifestEntry:
    instance_id: str
    modality: str
    category: str
    path: str


@dataclass
class DatasetManifest:
    name: str
    categories: list[tuple[str, int]]
    splits: dict[str, list[str]]
    entries: list[ManifestEntry]
    data_digest: str = ""
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self._validate()
        self.entries = sorted(self.entries, key=lambda e: e.instance_id)
        self._by_id = {e.instance_id: e for e in self.entries}

    def _validate(self) -> None:
        labels = [label for _, label in self.categories]
        if sorted(labels) != list(range(len(labels))):
            raise ManifestError(f"labels must be dense integers 0..{len(labels) - 1}, got {sorted(labels)}")
        declared = {name for name, _ in self.categories}
        seen_ids: set[str] = set()
        for e in self.entries:
            if e.category not in declared:
                raise ManifestError(f"entry {e.instance_id!r} uses undeclared category {e.category!r}")
            if e.modality not in ("sketch", "image"):
                raise ManifestError(f"entry {e.instance_id!r} has unknown modality {e.modality!r}")
            if e.instance_id in seen_ids:
                raise ManifestError(f"duplicate instance_id {e.instance_id!r}")
            seen_ids.add(e.instance_id)
        required = {"seen_train", "seen_test", "unseen"}
        if set(self.splits) != required:
            raise ManifestError(f"splits must be exactly {sorted(required)}, got {sorted(self.splits)}")
        assigned: set[str] = set()
        by_id = {e.instance_id: e for e in self.entries}
        for split, ids in self.splits.items():
            for iid in ids:
                if iid not in by_id:
                    raise ManifestError(f"split {split!r} references unknown instance {iid!r}")
                if iid in assigned:
                    raise ManifestError(f"instance {iid!r} assigned to more than one split")
                assigned.add(iid)
        if assigned != seen_ids:
            orphans = sorted(seen_ids - assigned)
            raise ManifestError(f"entries missing a split assignment: {orphans[:5]}")
        seen_cats = {by_id[i].category for i in self.splits["seen_train"] + self.splits["seen_test"]}
        unseen_cats = {by_id[i].category for i in self.splits["unseen"]}
        overlap = seen_cats & unseen_cats
        if overlap:
            raise ManifestError(f"unseen category in a training split: {sorted(overlap)}")

    # -- accessors ----------------------------------------------------------

    @property
    def label_by_category(self) -> dict[str, int]:
        return dict(self.categories)

    @property
    def seen_categories(self) -> list[str]:
        by_id = self._by_id
        cats = {by_id[i].category for i in self.splits["seen_train"] + self.splits["seen_test"]}
        return sorted(cats)

    @property
    def unseen_categories(self) -> list[str]:
        cats = {self._by_id[i].category for i in self.splits["unseen"]}
        return sorted(cats)

    def entry(self, instance_id: str) -> ManifestEntry:
        return self._by_id[instance_id]

    def instances(self, split: str, modality: str | None = None) -> list[ManifestEntry]:
        out = [self._by_id[i] for i in sorted(self.splits[split])]
        if modality is not None:
            out = [e for e in out if e.modality == modality]
        return out

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    # -- persistence ----------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {
            "version": MANIFEST_VERSION,
            "name": self.name,
            "data_digest": self.data_digest,
            "categories": [[n, l] for n, l in self.categories],
            "splits": {k: sorted(v) for k, v in self.splits.items()},
            "entries": [{"instance_id": e.instance_id, "modality": e.modality,
                         "category": e.category, "path": e.path}
                        for e in self.entries],
        }
        path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
        return path


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    raw = json.loads(path.read_text())
    if raw.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {raw.get('version')!r}")
    return DatasetManifest(
        name=raw["name"],
        categories=[(n, int(l)) for n, l in raw["categories"]],
        splits={k: list(v) for k, v in raw["splits"].items()},
        entries=[ManifestEntry(**e) for e in raw["entries"]],
        data_digest=raw.get("data_digest", ""),
        root=path.parent,
    )


# ---------------------------------------------------------------------------
# raster IO

def bilinear_resize(img: np.ndarray, out_size: int) -> np.ndarray:
    """Resample an (h, w, c) array to (out_size, out_size, c), edge-clamped."""
    h, w, _ = img.shape
    if h == out_size and w == out_size:
        return img.astype(np.float64, copy=True)

    def axis_coords(n_in, n_out):
        coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.clip(np.floor(coords).astype(int), 0, n_in - 1)
        hi = np.clip(lo + 1, 0, n_in - 1)
        frac = np.clip(coords - lo, 0.0, 1.0)
        return lo, hi, frac

    ylo, yhi, fy = axis_coords(h, out_size)
    xlo, xhi, fx = axis_coords(w, out_size)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[ylo][:, xlo] * (1 - fx) + img[ylo][:, xhi] * fx
    bot = img[yhi][:, xlo] * (1 - fx) + img[yhi][:, xhi] * fx
    return top * (1 - fy) + bot * fy


def write_grid(path: str | Path, arr: np.ndarray) -> None:
    """Raw float grid: magic, dtype tag, ndim, uint32 dims, little-endian data."""
    arr = np.asarray(arr)
    tag = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}.get(arr.dtype)
    if tag is None:
        raise ValueError(f"grid files hold float32/float64, got {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(_GRID_MAGIC)
        fh.write(struct.pack("<BB", tag, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def read_grid(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(len(_GRID_MAGIC))
        if magic != _GRID_MAGIC:
            raise ValueError(f"not a float-grid file: {path}")
        tag, ndim = struct.unpack("<BB", fh.read(2))
        dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        dtype = np.dtype(np.float64 if tag == 0 else np.float32).newbyteorder("<")
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"truncated grid file: {path}")
    return data.reshape(dims).astype(np.float64)


def load_raster(source, input_size: int, channels: int,
                manifest: DatasetManifest | None = None) -> RasterInstance:
    """Decode a manifest entry or bare path, resize, and scale to [0, 1].

    Grayscale content is replicated to the configured channel count so both
    modalities go through one tokenizer signature.
    """
    if isinstance(source, ManifestEntry):
        entry = source
        if manifest is None:
            raise ValueError("loading a manifest entry needs the manifest for path resolution")
        path = manifest.resolve(entry)
        label = manifest.label_by_category[entry.category]
        meta = (entry.modality, label, entry.instance_id, entry.category)
    else:
        path = Path(source)
        meta = ("sketch", -1, path.stem, "")

    if not path.exists():
        raise FileNotFoundError(f"raster file missing: {path}")
    if path.suffix == ".grid":
        arr = read_grid(path)
        if arr.ndim == 2:
            arr = arr[:, :, None]
    else:
        try:
            with Image.open(path) as im:
                im = im.convert("L") if im.mode in ("1", "L", "I;16") else im.convert("RGB")
                arr = np.asarray(im, dtype=np.float64) / 255.0
        except Exception as exc:  # decode failures name the file
            raise ValueError(f"cannot decode raster {path}: {exc}") from exc
        if arr.ndim == 2:
            arr = arr[:, :, None]

    if arr.shape[2] == 1 and channels > 1:
        arr = np.repeat(arr, channels, axis=2)
    if arr.shape[2] != channels:
        raise ValueError(f"raster {path} has {arr.shape[2]} channels, config wants {channels}")
    arr = bilinear_resize(arr, input_size)
    return RasterInstance(np.clip(arr, 0.0, 1.0), *meta)


# ---------------------------------------------------------------------------
# synthetic corpus

def _ngon(n: int, phase_deg: float = -90.0) -> list[tuple[float, float]]:
    ang = np.deg2rad(phase_deg) + 2 * np.pi * np.arange(n) / n
    return list(zip(np.cos(ang), np.sin(ang)))


def _star(points: int = 5, inner: float = 0.45) -> list[tuple[float, float]]:
    ang = np.deg2rad(-90.0) + np.pi * np.arange(2 * points) / points
    rad = np.where(np.arange(2 * points) % 2 == 0, 1.0, inner)
    return list(zip(rad * np.cos(ang), rad * np.sin(ang)))


def _cross(w: float = 0.36) -> list[tuple[float, float]]:
    return [(-w, -1), (w, -1), (w, -w), (1, -w), (1, w), (w, w),
            (w, 1), (-w, 1), (-w, w), (-1, w), (-1, -w), (-w, -w)]


def _arrow() -> list[tuple[float, float]]:
    return [(0, -1), (0.85, 0.05), (0.32, 0.05), (0.32, 1), (-0.32, 1),
            (-0.32, 0.05), (-0.85, 0.05)]


# (name, unit vertices, fill RGB, attribute phrases used by the canned corpus)
GLYPH_FAMILIES: list[tuple[str, list[tuple[float, float]], tuple[int, int, int], list[str]]] = [
    ("triangle", _ngon(3), (202, 72, 58),
     ["three straight sides", "three sharp corners",
      "a wide flat base", "a single pointed top"]),
    ("square", _ngon(4, phase_deg=45.0), (58, 118, 202),
     ["four equal sides", "four right angle corners",
      "a boxy even outline", "matching width and height"]),
    ("hexagon", _ngon(6, phase_deg=0.0), (70, 168, 92),
     ["six straight sides", "six evenly spaced corners",
      "a compact rounded looking outline", "opposite sides that run parallel"]),
    ("arrow", _arrow(), (212, 158, 52),
     ["a pointed triangular head", "a straight narrow tail",
      "one clearly pointed direction", "a notch where the head meets the tail"]),
    ("star", _star(), (158, 88, 190),
     ["five sharp points", "deep notches between the points",
      "spikes radiating from the center", "a pointed symmetric outline"]),
    ("cross", _cross(), (216, 116, 158),
     ["four rectangular arms", "arms meeting at right angles in the center",
      "a plus shaped outline", "equal length horizontal and vertical bars"]),
]


def canned_sentences(category: str, attrs: list[str], template_id: int) -> list[str]:
    """Fixed offline stand-in for a language-model response, one blob per template."""
    a = attrs
    if template_id == 1:
        return [f"a photo of a {category}.",
                f"a photo of a single {category} in the center.",
                f"a photo of a colored {category} shape.",
                f"a plain photo of one {category}.",
                f"a photo of a {category} on a textured background.",
                f"a simple photo of a {category} figure."]
    if template_id == 2:
        return [f"This photo shows one {category} drawn as a solid shape.",
                f"A single {category} sits in the middle of the frame.",
                f"The picture contains a colored {category} on a mottled backdrop.",
                f"A plain scene with a {category} as the only object.",
                f"The {category} in this photo has {a[0]}.",
                f"One filled {category} dominates the image."]
    if template_id == 3:
        return [f"A {category} looks like a flat figure with {a[0]}.",
                f"It has {a[1]}.",
                f"A typical {category} shows {a[2]}.",
                f"You can recognize a {category} by {a[0]} and {a[1]}.",
                f"Seen from the front a {category} presents {a[3]}.",
                f"The overall form of a {category} is defined by {a[2]}."]
    if template_id == 4:
        return [f"A {category} has {a[0]}.",
                f"It is distinguished by {a[1]}.",
                f"Look for {a[2]} when identifying a {category}.",
                f"The outline of a {category} shows {a[3]}.",
                f"Its silhouette features {a[0]} and {a[2]}.",
                f"Unlike other shapes a {category} combines {a[1]} with {a[3]}."]
    raise ValueError(f"template_id must be 1..4, got {template_id}")


def _instance_rng(seed: int, cat_idx: int, modality: str, idx: int) -> np.random.Generator:
    return np.random.default_rng([seed, cat_idx, 0 if modality == "sketch" else 1, idx])


def _jittered_points(verts, rng, size: int) -> list[tuple[float, float]]:
    rot = rng.uniform(-0.18, 0.18)
    sc = size * 0.5 * rng.uniform(0.62, 0.82)
    cx = size * 0.5 + rng.uniform(-0.05, 0.05) * size
    cy = size * 0.5 + rng.uniform(-0.05, 0.05) * size
    cos_r, sin_r = np.cos(rot), np.sin(rot)
    pts = []
    for x, y in verts:
        xr = x * cos_r - y * sin_r
        yr = x * sin_r + y * cos_r
        jx = rng.normal(0.0, 0.012) * size
        jy = rng.normal(0.0, 0.012) * size
        pts.append((cx + xr * sc + jx, cy + yr * sc + jy))
    return pts


def _render_image(verts, color, rng, size: int) -> Image.Image:
    base = rng.uniform(0.55, 0.95, (8, 8, 3))
    tint = rng.uniform(0.9, 1.0, (1, 1, 3))
    bg = np.clip(bilinear_resize(base * tint, size), 0.0, 1.0)
    im = Image.fromarray((bg * 255).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(im)
    jitter = rng.integers(-18, 19, size=3)
    fill = tuple(int(np.clip(c + j, 0, 255)) for c, j in zip(color, jitter))
    outline = tuple(max(0, c - 70) for c in fill)
    draw.polygon(_jittered_points(verts, rng, size), fill=fill, outline=outline)
    return im


def _render_sketch(verts, rng, size: int) -> Image.Image:
    im = Image.new("L", (size, size), color=255)
    draw = ImageDraw.Draw(im)
    pts = _jittered_points(verts, rng, size)
    shade = int(rng.integers(0, 60))
    width = max(1, size // 32)
    closed = pts + [pts[0]]
    # strokes drawn edge by edge with a midpoint wobble for a hand-drawn feel
    for (x0, y0), (x1, y1) in zip(closed[:-1], closed[1:]):
        mx = (x0 + x1) / 2 + rng.normal(0.0, 0.008) * size
        my = (y0 + y1) / 2 + rng.normal(0.0, 0.008) * size
        draw.line([(x0, y0), (mx, my), (x1, y1)], fill=shade, width=width)
    return im


def generate_synthetic(spec: SyntheticConfig, out_dir: str | Path,
                       data_digest: str = "") -> DatasetManifest:
    """Render the glyph corpus and write manifest + rasters + text corpus.

    The last two categories (by family order) form the unseen split; within
    each seen category the last 20% of instances per modality go to seen_test.
    """
    if spec.categories > len(GLYPH_FAMILIES):
        raise ValueError(f"at most {len(GLYPH_FAMILIES)} glyph families available, "
                         f"asked for {spec.categories}")
    if not 0 < spec.seen < spec.categories:
        raise ValueError(f"need 0 < seen < categories, got {spec.seen}/{spec.categories}")
    out_dir = Path(out_dir)
    raster_dir = out_dir / "rasters"
    raster_dir.mkdir(parents=True, exist_ok=True)

    families = GLYPH_FAMILIES[:spec.categories]
    categories = [(name, i) for i, (name, _, _, _) in enumerate(families)]
    seen_names = [name for name, _ in categories[:spec.seen]]
    entries: list[ManifestEntry] = []
    splits: dict[str, list[str]] = {"seen_train": [], "seen_test": [], "unseen": []}
    n_test = max(1, spec.per_category // 5)

    for ci, (name, verts, color, _) in enumerate(families):
        for modality in ("sketch", "image"):
            short = "sk" if modality == "sketch" else "img"
            for k in range(spec.per_category):
                rng = _instance_rng(spec.seed, ci, modality, k)
                iid = f"{name}_{short}_{k:03d}"
                rel = f"rasters/{iid}.png"
                if modality == "sketch":
                    im = _render_sketch(verts, rng, spec.render_size)
                else:
                    im = _render_image(verts, color, rng, spec.render_size)
                im.save(out_dir / rel, format="PNG")
                entries.append(ManifestEntry(iid, modality, name, rel))
                if name not in seen_names:
                    splits["unseen"].append(iid)
                elif k >= spec.per_category - n_test:
                    splits["seen_test"].append(iid)
                else:
                    splits["seen_train"].append(iid)

    corpus_path = out_dir / "corpus.jsonl"
    with open(corpus_path, "w") as fh:
        fh.write(json.dumps({"_meta": {"version": 1, "data_digest": data_digest,
                                       "kind": "offline-corpus"}}, sort_keys=True) + "\n")
        for name, _, _, attrs in families:
            for tid in (1, 2, 3, 4):
                rec = {"category": name, "template_id": tid,
                       "sentences": canned_sentences(name, attrs, tid),
                       "source": "offline"}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    manifest = DatasetManifest(name=f"synthetic-{spec.categories}", categories=categories,
                               splits=splits, entries=entries,
                               data_digest=data_digest, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def tree_digest(root: str | Path) -> str:
    """Content hash of a directory tree (sorted relative paths + bytes)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]
