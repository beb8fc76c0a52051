"""Point-cloud ingestion, normalization, augmentation and grouping."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCloud, ParseError
from .linalg import rotation_y

SPLITS = ("train", "val", "test")
SYNTH_CLASSES = ("sphere", "cube", "cone", "torus")
JITTER_STD = 0.01
JITTER_CLIP = 0.008


@dataclass
class PointCloud:
    points: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self):
        return len(self.points)


@dataclass
class Dataset:
    name: str
    clouds: list
    class_names: list
    splits: list = field(default_factory=list)

    def __post_init__(self):
        if not self.splits:
            self.splits = ["train"] * len(self.clouds)
        if len(self.splits) != len(self.clouds):
            raise ValueError("one split tag per cloud required")
        for c in self.clouds:
            if c.label is None or not 0 <= c.label < len(self.class_names):
                raise ValueError(f"label {c.label} outside {len(self.class_names)} classes")
        for s in self.splits:
            if s not in SPLITS:
                raise ValueError(f"unknown split {s!r}")

    @property
    def n_classes(self):
        return len(self.class_names)

    def indices(self, split):
        return [i for i, s in enumerate(self.splits) if s == split]

    def arrays(self, split, n_points=None, seed=0):
        """Stack one split into ``(B, N, 3)`` points and ``(B,)`` labels.

        Clouds whose size differs from ``n_points`` are resampled.
        """
        idx = self.indices(split)
        if not idx:
            return np.zeros((0, n_points or 0, 3)), np.zeros(0, dtype=int)
        rng = np.random.default_rng(seed)
        n = n_points or len(self.clouds[idx[0]])
        pts = np.stack([resample(self.clouds[i].points, n, rng) for i in idx])
        labels = np.array([self.clouds[i].label for i in idx], dtype=int)
        return pts, labels


@dataclass
class PatchSet:
    centers: np.ndarray  # (M, 3)
    patches: np.ndarray  # (M, k, 3), offsets from the center
    indices: np.ndarray  # (M, k) source point indices


def resample(points, n, rng):
    if len(points) == n:
        return points
    replace = len(points) < n
    return points[np.sort(rng.choice(len(points), n, replace=replace))]


# ---------------------------------------------------------------- parsers

def _text(data):
    if isinstance(data, (bytes, bytearray)):
        return data.decode("ascii", errors="replace")
    return data


def _floats(tokens, lineno, n=3):
    if len(tokens) < n:
        raise ParseError(f"expected {n} numbers, got {len(tokens)}", lineno)
    try:
        vals = [float(t) for t in tokens[:n]]
    except ValueError:
        raise ParseError(f"non-numeric value in {' '.join(tokens[:n])!r}", lineno) from None
    if not all(np.isfinite(vals)):
        raise ParseError("non-finite coordinate", lineno)
    return vals


def _content_lines(text):
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield i, line


def parse_off(data) -> PointCloud:
    """Vertices of an ASCII OFF mesh.

    Accepts the ModelNet header defect where ``OFF`` is fused to the counts
    (``OFF3 1 0``) as well as a missing ``OFF`` line.
    """
    lines = list(_content_lines(_text(data)))
    if not lines:
        raise ParseError("empty OFF input", 1)
    pos = 0
    lineno, first = lines[0]
    if first.upper().startswith("OFF"):
        rest = first[3:].strip()
        if rest:
            counts_tokens = rest.split()
            pos = 1
        else:
            if len(lines) < 2:
                raise ParseError("missing counts line", lineno + 1)
            lineno, counts_line = lines[1]
            counts_tokens = counts_line.split()
            pos = 2
    elif first.upper().endswith("OFF"):
        counts_tokens = first[:-3].split()
        pos = 1
    else:
        counts_tokens = first.split()
        pos = 1
    if len(counts_tokens) < 2:
        raise ParseError("malformed counts line", lineno)
    try:
        n_vert, n_face = int(counts_tokens[0]), int(counts_tokens[1])
    except ValueError:
        raise ParseError(f"malformed counts {' '.join(counts_tokens)!r}", lineno) from None
    if n_vert < 1 or n_face < 0:
        raise ParseError("vertex count must be positive", lineno)
    body = lines[pos:]
    if len(body) < n_vert + n_face:
        last = body[-1][0] if body else lineno
        raise ParseError(f"truncated: expected {n_vert} vertices and {n_face} faces", last + 1)
    pts = [_floats(line.split(), ln) for ln, line in body[:n_vert]]
    return PointCloud(np.array(pts))


def parse_xyz(data) -> PointCloud:
    pts = [_floats(line.split(), ln) for ln, line in _content_lines(_text(data))]
    if not pts:
        raise ParseError("no points", 1)
    return PointCloud(np.array(pts))


def parse_ply_ascii(data) -> PointCloud:
    lines = _text(data).splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    elements = []  # (name, count, [property names])
    i = 1
    while True:
        if i >= len(lines):
            raise ParseError("header without end_header", i)
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError(f"unsupported PLY format {' '.join(tok[1:])!r}", i)
        elif tok[0] == "element":
            try:
                elements.append((tok[1], int(tok[2]), []))
            except (IndexError, ValueError):
                raise ParseError("malformed element line", i) from None
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before element", i)
            elements[-1][2].append(tok[-1])
        elif tok[0] == "end_header":
            break
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", i)
    pts = None
    for name, count, props in elements:
        if name == "vertex":
            try:
                cols = [props.index(c) for c in ("x", "y", "z")]
            except ValueError:
                raise ParseError("vertex element lacks x/y/z", i) from None
            pts = []
            for _ in range(count):
                while i < len(lines) and not lines[i].strip():
                    i += 1
                if i >= len(lines):
                    raise ParseError("truncated vertex list", i + 1)
                tok = lines[i].split()
                i += 1
                if len(tok) < len(props):
                    raise ParseError("too few vertex properties", i)
                pts.append(_floats([tok[c] for c in cols], i))
        else:
            i += count
    if not pts:
        raise ParseError("no vertices", i)
    return PointCloud(np.array(pts))


def load_cloud(path) -> PointCloud:
    ext = os.path.splitext(path)[1].lower()
    with open(path, "rb") as f:
        data = f.read()
    if ext == ".off":
        return parse_off(data)
    if ext == ".ply":
        return parse_ply_ascii(data)
    if ext in (".xyz", ".txt", ".pts"):
        return parse_xyz(data)
    raise ParseError(f"unknown point-cloud extension {ext!r}")


def write_xyz(path, points):
    np.savetxt(path, np.asarray(points), fmt="%.17g")


# ---------------------------------------------------------- manifests

def load_manifest(path, n_points=None, normalize_clouds=True) -> Dataset:
    """Read a JSON manifest of ``{path, label, split}`` records.

    The file is either a bare list of records or an object with ``records``
    and optional ``name``/``class_names``. Paths are relative to the manifest.
    """
    with open(path) as f:
        doc = json.load(f)
    if isinstance(doc, list):
        doc = {"records": doc}
    base = os.path.dirname(os.path.abspath(path))
    records = doc["records"]
    n_classes = max(int(r["label"]) for r in records) + 1
    class_names = doc.get("class_names") or [str(i) for i in range(n_classes)]
    clouds, splits = [], []
    rng = np.random.default_rng(0)
    for r in records:
        cloud = load_cloud(os.path.join(base, r["path"]))
        pts = cloud.points
        if n_points:
            pts = resample(pts, n_points, rng)
        if normalize_clouds:
            pts = normalize(pts)
        clouds.append(PointCloud(pts, int(r["label"])))
        splits.append(r.get("split", "train"))
    return Dataset(doc.get("name", os.path.basename(path)), clouds, list(class_names), splits)


def save_dataset(dataset: Dataset, directory) -> str:
    """Write every cloud as ``.xyz`` plus ``manifest.json``; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    records = []
    for i, (cloud, split) in enumerate(zip(dataset.clouds, dataset.splits)):
        name = f"{split}_{i:05d}.xyz"
        write_xyz(os.path.join(directory, name), cloud.points)
        records.append({"path": name, "label": int(cloud.label), "split": split})
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as f:
        json.dump({"name": dataset.name, "class_names": dataset.class_names, "records": records}, f, indent=1)
    return path


# ------------------------------------------------------- preprocessing

def _points(cloud):
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)


def normalize(cloud):
    """Center on the centroid and scale into the unit sphere."""
    pts = _points(cloud)
    centered = pts - pts.mean(axis=0)
    radius = np.sqrt((centered ** 2).sum(axis=1)).max()
    if not radius > 0:
        raise DegenerateCloud("all points identical")
    out = centered / radius
    if isinstance(cloud, PointCloud):
        return PointCloud(out, cloud.label)
    return out


def augment(cloud, seed, policy="modelnet", scale_range=(0.8, 1.2), translate_std=0.01):
    """Random per-cloud augmentation.

    ``modelnet``: uniform scale in ``scale_range`` and one Gaussian offset.
    ``scanobject``: rotation about the vertical (y) axis.
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pts = _points(cloud)
    if policy == "modelnet":
        s = rng.uniform(*scale_range)
        t = rng.normal(0.0, 1.0, size=3) * translate_std
        out = pts * s + t
    elif policy == "scanobject":
        theta = rng.uniform(0.0, 2.0 * np.pi)
        out = pts @ rotation_y(theta).T
    elif policy == "none":
        out = pts.copy()
    else:
        raise ValueError(f"unknown augmentation policy {policy!r}")
    if isinstance(cloud, PointCloud):
        return PointCloud(out, cloud.label)
    return out


def fps(cloud, m, start_index=0):
    """Greedy farthest-point sampling; ties go to the lowest index."""
    pts = _points(cloud)
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= M <= N, got M={m}, N={n}")
    picked = np.empty(m, dtype=int)
    picked[0] = start_index
    mind = ((pts - pts[start_index]) ** 2).sum(axis=1)
    for j in range(1, m):
        nxt = int(np.argmax(mind))
        picked[j] = nxt
        mind = np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return picked


def knn_group(cloud, centers, k) -> PatchSet:
    pts = _points(cloud)
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    if k > len(pts):
        raise ValueError(f"k={k} exceeds cloud size {len(pts)}")
    d2 = ((centers[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return PatchSet(centers, pts[idx] - centers[:, None, :], idx)


def sample_patches(cloud, n_centers, k, rng):
    """FPS centers from a random start followed by KNN grouping."""
    pts = _points(cloud)
    start = int(rng.integers(len(pts)))
    centers = pts[fps(pts, n_centers, start)]
    return knn_group(pts, centers, k)


# ------------------------------------------------------ synthetic data

def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * i
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _cube(n, rng):
    face = rng.integers(6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        others = [b for b in range(3) if b != a]
        sel = axis == a
        pts[sel, a] = sign[sel]
        pts[sel, others[0]] = uv[sel, 0]
        pts[sel, others[1]] = uv[sel, 1]
    return pts * rng.uniform(0.8, 1.2, size=3)


def _cone(n, rng):
    radius = rng.uniform(0.5, 1.0)
    height = rng.uniform(1.2, 2.0)
    slant = np.hypot(radius, height)
    lateral = np.pi * radius * slant
    base = np.pi * radius ** 2
    on_base = rng.uniform(size=n) < base / (lateral + base)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    # area-uniform radial coordinate on both the disk and the lateral surface
    s = np.sqrt(rng.uniform(size=n))
    r = np.where(on_base, radius * s, radius * s)
    y = np.where(on_base, 0.0, height * (1.0 - s))
    return np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)


def _torus(n, rng):
    big = 1.0
    small = rng.uniform(0.25, 0.45)
    out = np.empty((0, 3))
    # rejection sampling for area-uniform points
    while len(out) < n:
        u = rng.uniform(0.0, 2.0 * np.pi, size=2 * n)
        v = rng.uniform(0.0, 2.0 * np.pi, size=2 * n)
        keep = rng.uniform(size=2 * n) < (big + small * np.cos(v)) / (big + small)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        out = np.vstack([out, np.stack([ring * np.cos(u), small * np.sin(v), ring * np.sin(u)], axis=1)])
    return out[:n]


def synth_shape(kind, n_points, rng):
    if kind == "sphere":
        pts = _fibonacci_sphere(n_points)
    elif kind == "cube":
        pts = _cube(n_points, rng)
    elif kind == "cone":
        pts = _cone(n_points, rng)
    elif kind == "torus":
        pts = _torus(n_points, rng)
    else:
        raise ValueError(kind)
    pts = pts @ rotation_y(rng.uniform(0.0, 2.0 * np.pi)).T
    jitter = np.clip(rng.normal(0.0, JITTER_STD, size=pts.shape), -JITTER_CLIP, JITTER_CLIP)
    return normalize(pts + jitter)


def synth_dataset(seed, n_per_class, n_points, n_test_per_class=0, val_fraction=0.0) -> Dataset:
    """Four classes of surface-sampled shapes, deterministic in ``seed``.

    Each class gets ``n_per_class`` training clouds (of which ``val_fraction``
    are tagged ``val``) plus ``n_test_per_class`` test clouds.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    n_val = int(round(n_per_class * val_fraction))
    clouds, splits = [], []
    for label, kind in enumerate(SYNTH_CLASSES):
        for j in range(n_per_class + n_test_per_class):
            clouds.append(PointCloud(synth_shape(kind, n_points, rng), label))
            if j >= n_per_class:
                splits.append("test")
            elif j < n_val:
                splits.append("val")
            else:
                splits.append("train")
    return Dataset(f"synthetic-{seed}", clouds, list(SYNTH_CLASSES), splits)
