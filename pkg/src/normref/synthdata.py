"""Analytic benchmark shapes, PCPNet-style noise/density variants, and file I/O."""
from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .geom import PointCloud, bbox_diagonal

MANIFEST_VERSION = 1

# Stripe variant: 4 bands in a [0, 1) area-uniform parameter, 30% of the area in total.
STRIPE_BANDS = 4
STRIPE_FRACTION = 0.3
# Gradient variant: acceptance ramps linearly along x from 1.0 down to this floor.
GRADIENT_MIN_ACCEPT = 0.05


class ShapeKind(str, enum.Enum):
    SPHERE = "sphere"
    TORUS = "torus"
    CUBE = "cube"
    CYLINDER = "cylinder"
    SHEET_STACK = "sheets"


class DensityMode(str, enum.Enum):
    UNIFORM = "uniform"
    STRIPES = "stripes"
    GRADIENT = "gradient"


DEFAULT_PARAMS = {
    ShapeKind.SPHERE: {"radius": 1.0},
    ShapeKind.TORUS: {"major": 1.0, "minor": 0.3},
    ShapeKind.CUBE: {"edge": 2.0},
    ShapeKind.CYLINDER: {"radius": 0.5, "height": 2.0},
    ShapeKind.SHEET_STACK: {"size": 2.0, "thickness": 0.1, "gap": 0.2, "count": 2},
}


@dataclass
class ShapeSpec:
    kind: ShapeKind
    parameters: dict = field(default_factory=dict)
    sample_count: int = 5000
    density_mode: DensityMode = DensityMode.UNIFORM
    noise_pct: float = 0.0
    seed: int = 0

    def __post_init__(self):
        try:
            self.kind = ShapeKind(self.kind)
        except ValueError:
            raise DataError(f"unknown shape kind {self.kind!r}") from None
        self.density_mode = DensityMode(self.density_mode)
        self.parameters = {**DEFAULT_PARAMS[self.kind], **self.parameters}
        if self.sample_count < 100:
            raise DataError(f"sample_count must be >= 100, got {self.sample_count}")
        if not 0.0 <= self.noise_pct <= 5.0:
            raise DataError(f"noise_pct must lie in [0, 5], got {self.noise_pct}")
        if self.kind is ShapeKind.SHEET_STACK and self.parameters["gap"] <= 0:
            raise DataError("sheet stack gap must be positive")


def _sphere(n, rng, radius):
    g = rng.normal(size=(n, 3))
    normals = g / np.linalg.norm(g, axis=1, keepdims=True)
    u = (normals[:, 2] + 1.0) / 2.0
    return normals * radius, normals, u


def _torus(n, rng, major, minor):
    thetas = []
    have = 0
    while have < n:
        t = rng.uniform(0.0, 2.0 * np.pi, size=2 * n)
        accept = rng.random(2 * n) < (major + minor * np.cos(t)) / (major + minor)
        thetas.append(t[accept])
        have += int(accept.sum())
    theta = np.concatenate(thetas)[:n]
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts, normals = torus_surface(theta, phi, major, minor)
    return pts, normals, phi / (2.0 * np.pi)


def torus_surface(theta, phi, major, minor):
    """Torus points and outward normals at tube angle ``theta`` and ring angle ``phi``."""
    ring = major + minor * np.cos(theta)
    pts = np.stack([ring * np.cos(phi), ring * np.sin(phi), minor * np.sin(theta)], axis=1)
    normals = np.stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), np.sin(theta)], axis=1)
    return pts, normals


def _box_faces(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    faces = []
    for axis in range(3):
        a, b = [d for d in range(3) if d != axis]
        for side, sign in ((lo, -1.0), (hi, 1.0)):
            origin = lo.copy()
            origin[axis] = side[axis]
            e1 = np.zeros(3)
            e1[a] = ext[a]
            e2 = np.zeros(3)
            e2[b] = ext[b]
            normal = np.zeros(3)
            normal[axis] = sign
            faces.append((origin, e1, e2, normal))
    return faces


def _sample_faces(n, rng, faces):
    areas = np.array([np.linalg.norm(np.cross(e1, e2)) for _, e1, e2, _ in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    st = rng.random((n, 2))
    origin = np.array([f[0] for f in faces])[which]
    e1 = np.array([f[1] for f in faces])[which]
    e2 = np.array([f[2] for f in faces])[which]
    normals = np.array([f[3] for f in faces])[which]
    pts = origin + st[:, :1] * e1 + st[:, 1:] * e2
    start = np.concatenate([[0.0], np.cumsum(areas)[:-1]])
    u = (start[which] + st[:, 0] * areas[which]) / areas.sum()
    return pts, normals, u


def _cube(n, rng, edge):
    h = edge / 2.0
    return _sample_faces(n, rng, _box_faces([-h] * 3, [h] * 3))


def _sheets(n, rng, size, thickness, gap, count):
    count = int(count)
    pitch = thickness + gap
    z0 = -(count * thickness + (count - 1) * gap) / 2.0
    h = size / 2.0
    faces = []
    for i in range(count):
        lo = z0 + i * pitch
        faces += _box_faces([-h, -h, lo], [h, h, lo + thickness])
    return _sample_faces(n, rng, faces)


def _cylinder(n, rng, radius, height):
    lateral = 2 * np.pi * radius * height
    cap = np.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    ang = rng.uniform(0.0, 2.0 * np.pi, size=n)
    z = rng.uniform(-height / 2, height / 2, size=n)
    rr = radius * np.sqrt(rng.random(n))
    c, s = np.cos(ang), np.sin(ang)
    pts = np.empty((n, 3))
    normals = np.zeros((n, 3))
    side = part == 0
    pts[side] = np.stack([radius * c[side], radius * s[side], z[side]], axis=1)
    normals[side] = np.stack([c[side], s[side], np.zeros(side.sum())], axis=1)
    for p, zc, sign in ((1, height / 2, 1.0), (2, -height / 2, -1.0)):
        m = part == p
        pts[m] = np.stack([rr[m] * c[m], rr[m] * s[m], np.full(m.sum(), zc)], axis=1)
        normals[m, 2] = sign
    return pts, normals, ang / (2.0 * np.pi)


_SAMPLERS = {
    ShapeKind.SPHERE: _sphere,
    ShapeKind.TORUS: _torus,
    ShapeKind.CUBE: _cube,
    ShapeKind.CYLINDER: _cylinder,
    ShapeKind.SHEET_STACK: _sheets,
}


def stripe_mask(u) -> np.ndarray:
    """True where the band parameter falls inside a removed stripe."""
    return np.mod(np.asarray(u) * STRIPE_BANDS, 1.0) < STRIPE_FRACTION


def sample_shape(spec: ShapeSpec, name: str | None = None) -> PointCloud:
    rng = np.random.default_rng(spec.seed)
    pts, normals, u = _SAMPLERS[spec.kind](spec.sample_count, rng, **spec.parameters)
    if spec.density_mode is DensityMode.STRIPES:
        keep = ~stripe_mask(u)
    elif spec.density_mode is DensityMode.GRADIENT:
        x = pts[:, 0]
        t = (x - x.min()) / (x.max() - x.min())
        keep = rng.random(len(x)) < 1.0 - (1.0 - GRADIENT_MIN_ACCEPT) * t
    else:
        keep = slice(None)
    return PointCloud(pts[keep], normals[keep], name=name or f"{spec.kind.value}_{spec.density_mode.value}")


def realize(spec: ShapeSpec) -> tuple[PointCloud, PointCloud]:
    """Clean cloud plus its noisy twin at ``spec.noise_pct``."""
    clean = sample_shape(spec)
    return clean, add_noise(clean, spec.noise_pct, spec.seed + 1)


def add_noise(clean: PointCloud, noise_pct: float, seed: int, name: str | None = None) -> PointCloud:
    """Gaussian jitter with sigma = noise_pct% of the bbox diagonal.

    Annotated normals are copied unchanged, deliberately stale for noisy points.
    """
    if noise_pct < 0:
        raise DataError(f"noise percentage must be nonnegative, got {noise_pct}")
    if clean.gt_normals is None:
        raise DataError("clean cloud has no ground-truth normals")
    sigma = noise_pct / 100.0 * bbox_diagonal(clean.points)
    pts = clean.points.copy()
    if sigma > 0:
        pts = pts + np.random.default_rng(seed).normal(0.0, sigma, size=pts.shape)
    return PointCloud(pts, clean.gt_normals.copy(), clean_ref=clean.name,
                      name=name or f"{clean.name}_n{noise_pct:g}")


# ---------------------------------------------------------------------------
# ASCII formats

def strip_extension(path_prefix) -> Path:
    # Names like "torus_n0.6" contain dots, so Path.with_suffix cannot be used.
    p = Path(path_prefix)
    for ext in (".xyz", ".normals"):
        if p.name.endswith(ext):
            return p.with_name(p.name[: -len(ext)])
    return p


def _with_ext(prefix: Path, ext: str) -> Path:
    return prefix.with_name(prefix.name + ext)


def write_triples(path, arr) -> None:
    np.savetxt(path, np.asarray(arr, dtype=np.float64), fmt="%.9g")


def read_triples(path) -> np.ndarray:
    rows = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 values, found {len(tokens)}")
            try:
                vals = [float(t) for t in tokens]
            except ValueError:
                raise DataError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}:{lineno}: non-finite value in {line.strip()!r}")
            rows.append(vals)
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def write_cloud(cloud: PointCloud, path_prefix) -> tuple[Path, Path | None]:
    prefix = strip_extension(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    xyz = _with_ext(prefix, ".xyz")
    write_triples(xyz, cloud.points)
    normals = None
    if cloud.gt_normals is not None:
        normals = _with_ext(prefix, ".normals")
        write_triples(normals, cloud.gt_normals)
    return xyz, normals


def read_cloud(path_prefix, normals_path=None, clean_ref: str | None = None) -> PointCloud:
    prefix = strip_extension(path_prefix)
    xyz = _with_ext(prefix, ".xyz")
    pts = read_triples(xyz)
    if len(pts) == 0:
        raise DataError(f"{xyz}: no points")
    npath = Path(normals_path) if normals_path else _with_ext(prefix, ".normals")
    normals = None
    if npath.exists():
        normals = read_triples(npath)
        if len(normals) != len(pts):
            raise DataError(f"{npath} has {len(normals)} lines but {xyz} has {len(pts)}")
    return PointCloud(pts, normals, clean_ref=clean_ref, name=prefix.name)


# ---------------------------------------------------------------------------
# Benchmark manifests

@dataclass
class ManifestEntry:
    clean: str
    noisy: str
    normals: str
    category: str
    split: str
    shape: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split: str
    base_dir: Path = field(default=Path("."), compare=False)
    seed: int | None = None

    def path(self, rel: str) -> Path:
        return self.base_dir / rel

    def load_clean(self, entry: ManifestEntry) -> PointCloud:
        return read_cloud(self.path(entry.clean))

    def load_noisy(self, entry: ManifestEntry) -> PointCloud:
        clean_name = strip_extension(entry.clean).name
        return read_cloud(self.path(entry.noisy), self.path(entry.normals), clean_ref=clean_name)

    def to_json(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "split": self.split,
            "seed": self.seed,
            "entries": [vars(e) for e in self.entries],
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if raw.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {raw.get('version')!r}")
    entries = [ManifestEntry(**e) for e in raw["entries"]]
    return DatasetManifest(entries, raw["split"], base_dir=path.parent, seed=raw.get("seed"))


def noise_category(pct: float) -> str:
    return f"noise_{pct:g}"


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def build_benchmark(output_dir, shapes, noise_levels=(0.0, 0.12, 0.6, 1.2),
                    densities=(DensityMode.UNIFORM,), n: int = 5000, seed: int = 7,
                    split: str = "train") -> DatasetManifest:
    """Write clean/noisy clouds and ``manifest.json`` under ``output_dir``.

    Uniform-density shapes get one noisy twin per noise level; stripe and
    gradient variants are emitted noise-free, as in PCPNet.
    """
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    kinds = [ShapeKind(s) for s in shapes]
    modes = [DensityMode(d) for d in densities]
    entries = []
    for kind in kinds:
        kcode = list(ShapeKind).index(kind)
        for mode in modes:
            dcode = list(DensityMode).index(mode)
            base = f"{kind.value}_{mode.value}"
            spec = ShapeSpec(kind, sample_count=n, density_mode=mode, seed=_derived_seed(seed, kcode, dcode))
            clean = sample_shape(spec, name=f"{base}_clean")
            try:
                write_cloud(clean, out / clean.name)
            except OSError as exc:
                raise DataError(f"cannot write {out / clean.name}: {exc}") from None
            levels = noise_levels if mode is DensityMode.UNIFORM else (0.0,)
            for li, pct in enumerate(levels):
                noisy = add_noise(clean, float(pct), _derived_seed(seed, kcode, dcode, li + 1),
                                  name=f"{base}_n{pct:g}")
                try:
                    write_cloud(noisy, out / noisy.name)
                except OSError as exc:
                    raise DataError(f"cannot write {out / noisy.name}: {exc}") from None
                category = noise_category(pct) if mode is DensityMode.UNIFORM else mode.value
                entries.append(ManifestEntry(
                    clean=f"{clean.name}.xyz", noisy=f"{noisy.name}.xyz",
                    normals=f"{noisy.name}.normals", category=category,
                    split=split, shape=kind.value,
                ))
    manifest = DatasetManifest(entries, split, base_dir=out, seed=seed)
    manifest.save(out / "manifest.json")
    return manifest


def resolve_clean_refs(manifest: DatasetManifest) -> list[str]:
    """Return entries whose clean twin is missing (empty when all resolve)."""
    return [e.noisy for e in manifest.entries if not os.path.exists(manifest.path(e.clean))]
