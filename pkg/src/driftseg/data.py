"""Label ingestion, synthetic multi-domain pair generation and augmentation.

The ingest path reads xBD-style label JSON (building footprints as WKT
polygons with a damage subtype) and rasterizes them to 5-class masks by
even-odd ray casting at pixel centers. The synthetic path generates
image pairs with controllable per-domain covariate shift: each domain
owns a background palette, a global post-image color gain, a texture
scale and a damage-class profile, with the damage-driving force shaping
where the damage lands (directional streaks, radial patches, low bands).
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

DAMAGE_CLASSES = {"no-damage": 1, "minor-damage": 2, "major-damage": 3, "destroyed": 4}
FORCES = ("wind", "fire", "water")

TEXTURE_AMP = 0.08
PIXEL_NOISE = 0.01


class LabelError(ValueError):
    """Malformed label JSON, WKT or subtype."""


@dataclass
class PolygonAnnotation:
    ring: list[tuple[float, float]]  # (x, y) vertices, not closed
    damage_class: int
    uid: str = ""

    def __post_init__(self):
        distinct = {(float(x), float(y)) for x, y in self.ring}
        if len(distinct) < 3:
            raise LabelError(f"polygon ring needs >=3 distinct vertices, got {len(distinct)}")
        if not 1 <= self.damage_class <= 4:
            raise LabelError(f"damage_class must be 1..4, got {self.damage_class}")


@dataclass
class Sample:
    pre: np.ndarray   # H,W,3 uint8
    post: np.ndarray  # H,W,3 uint8
    mask: np.ndarray  # H,W uint8, values 0..4
    domain_id: str
    sample_id: str

    def validate(self) -> None:
        if self.pre.shape != self.post.shape or self.pre.shape[:2] != self.mask.shape:
            raise ValueError("pre/post/mask must share H,W")
        if self.mask.max(initial=0) > 4:
            raise ValueError("mask values must lie in 0..4")


@dataclass
class DomainSpec:
    name: str
    force: str
    base_palette: tuple[float, float, float]
    gain_shift: tuple[float, float, float]
    texture_scale: float = 12.0
    building_density: float = 8.0
    damage_profile: tuple[float, float, float, float] = (0.4, 0.25, 0.2, 0.15)
    seed: int = 0

    def validate(self) -> None:
        if self.force not in FORCES:
            raise ValueError(f"force must be one of {FORCES}, got {self.force!r}")
        if abs(sum(self.damage_profile) - 1.0) > 1e-9:
            raise ValueError("damage_profile must sum to 1")
        if any(p < 0 for p in self.damage_profile):
            raise ValueError("damage_profile entries must be non-negative")
        if self.building_density <= 0:
            raise ValueError("building_density must be positive")
        if self.texture_scale <= 0:
            raise ValueError("texture_scale must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_json(self) -> dict:
        return {
            "name": self.name, "force": self.force,
            "base_palette": list(self.base_palette), "gain_shift": list(self.gain_shift),
            "texture_scale": self.texture_scale, "building_density": self.building_density,
            "damage_profile": list(self.damage_profile), "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DomainSpec":
        return cls(name=d["name"], force=d["force"],
                   base_palette=tuple(d["base_palette"]), gain_shift=tuple(d["gain_shift"]),
                   texture_scale=d.get("texture_scale", 12.0),
                   building_density=d.get("building_density", 8.0),
                   damage_profile=tuple(d.get("damage_profile", (0.4, 0.25, 0.2, 0.15))),
                   seed=d.get("seed", 0))


# ---------------------------------------------------------------------------
# label parsing

_WKT_POLYGON = re.compile(r"^\s*POLYGON\s*\(\s*\((?P<ring>[^()]*)\)\s*(?:,\s*\([^()]*\)\s*)*\)\s*$",
                          re.IGNORECASE)


def parse_wkt_polygon(wkt: str) -> list[tuple[float, float]]:
    """Exterior ring of a WKT POLYGON; the closing duplicate vertex is dropped."""
    m = _WKT_POLYGON.match(wkt)
    if not m:
        raise LabelError(f"unparseable WKT polygon: {wkt[:80]!r}")
    if wkt.count("(") > 2:
        warnings.warn("WKT polygon has interior rings; only the exterior is used")
    pts = []
    for tok in m.group("ring").split(","):
        parts = tok.split()
        if len(parts) != 2:
            raise LabelError(f"bad WKT coordinate pair: {tok!r}")
        try:
            pts.append((float(parts[0]), float(parts[1])))
        except ValueError as e:
            raise LabelError(f"bad WKT coordinate pair: {tok!r}") from e
    if len(pts) >= 2 and pts[0] == pts[-1]:
        pts = pts[:-1]
    return pts


def parse_labels(json_text: str, unclassified: str = "undamaged") -> list[PolygonAnnotation]:
    """Parse an xBD-style label file into polygon annotations.

    ``unclassified`` chooses how an "un-classified" subtype maps:
    "undamaged" assigns class 1, "ignore" drops the feature.
    """
    if unclassified not in ("undamaged", "ignore"):
        raise ValueError("unclassified must be 'undamaged' or 'ignore'")
    try:
        doc = json.loads(json_text)
    except json.JSONDecodeError as e:
        raise LabelError(f"malformed label JSON: {e}") from e
    feats = doc.get("features", [])
    if isinstance(feats, dict):  # real xBD nests pixel-frame features under "xy"
        feats = feats.get("xy", [])
    out = []
    for feat in feats:
        props = feat.get("properties", {})
        subtype = props.get("subtype")
        if subtype == "un-classified":
            if unclassified == "ignore":
                continue
            cls = 1
        elif subtype in DAMAGE_CLASSES:
            cls = DAMAGE_CLASSES[subtype]
        else:
            raise LabelError(f"unknown damage subtype: {subtype!r}")
        ring = parse_wkt_polygon(feat["wkt"])
        out.append(PolygonAnnotation(ring=ring, damage_class=cls, uid=props.get("uid", "")))
    return out


# ---------------------------------------------------------------------------
# rasterization

def _ring_cover(ring: np.ndarray, h: int, w: int) -> np.ndarray:
    """Boolean cover of pixels whose center lies inside the ring (even-odd)."""
    xs, ys = ring[:, 0], ring[:, 1]
    r0 = max(0, int(np.ceil(ys.min() - 0.5)))
    r1 = min(h - 1, int(np.floor(ys.max() - 0.5)))
    c0 = max(0, int(np.ceil(xs.min() - 0.5)))
    c1 = min(w - 1, int(np.floor(xs.max() - 0.5)))
    cover = np.zeros((h, w), dtype=bool)
    if r1 < r0 or c1 < c0:
        return cover
    py = np.arange(r0, r1 + 1, dtype=np.float64) + 0.5
    px = np.arange(c0, c1 + 1, dtype=np.float64) + 0.5
    inside = np.zeros((py.size, px.size), dtype=bool)
    m = len(ring)
    for i in range(m):
        x1, y1 = ring[i]
        x2, y2 = ring[(i + 1) % m]
        spans = (y1 > py) != (y2 > py)
        if not spans.any():
            continue
        xi = x1 + (py - y1) * (x2 - x1) / (y2 - y1) if y2 != y1 else np.full_like(py, np.inf)
        inside ^= spans[:, None] & (px[None, :] < xi[:, None])
    cover[r0:r1 + 1, c0:c1 + 1] = inside
    return cover


def _ring_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def rasterize(annotations: list[PolygonAnnotation], h: int, w: int) -> np.ndarray:
    """5-class mask: each pixel center assigned by even-odd ray casting.

    On overlaps the higher damage class wins. Degenerate (zero-area)
    polygons are skipped with a warning.
    """
    mask = np.zeros((h, w), dtype=np.uint8)
    for ann in annotations:
        ring = np.asarray(ann.ring, dtype=np.float64)
        if _ring_area(ring) == 0.0:
            warnings.warn(f"skipping degenerate polygon uid={ann.uid!r}")
            continue
        cover = _ring_cover(ring, h, w)
        np.maximum(mask, np.where(cover, np.uint8(ann.damage_class), np.uint8(0)), out=mask)
    return mask


# ---------------------------------------------------------------------------
# synthetic generator

def _value_noise(rng: np.random.Generator, h: int, w: int, scale: float) -> np.ndarray:
    """Smooth zero-mean noise field from bilinear upsampling of a coarse grid."""
    gh = int(np.ceil(h / scale)) + 1
    gw = int(np.ceil(w / scale)) + 1
    grid = rng.uniform(-1.0, 1.0, size=(gh + 1, gw + 1))
    ry = np.arange(h) / scale
    rx = np.arange(w) / scale
    y0 = np.minimum(ry.astype(np.int64), gh - 1)
    x0 = np.minimum(rx.astype(np.int64), gw - 1)
    fy = (ry - y0)[:, None]
    fx = (rx - x0)[None, :]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
            + g10 * fy * (1 - fx) + g11 * fy * fx)


def _building_ring(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """A jittered rotated rectangle (quadrilateral) in pixel coordinates."""
    margin = 4.0
    cx = rng.uniform(margin, w - margin)
    cy = rng.uniform(margin, h - margin)
    hw = rng.uniform(2.5, max(3.5, min(h, w) / 9.0))
    hh = rng.uniform(2.5, max(3.5, min(h, w) / 9.0))
    ang = rng.uniform(0.0, np.pi)
    ca, sa = np.cos(ang), np.sin(ang)
    base = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    rot = base @ np.array([[ca, sa], [-sa, ca]])
    jitter = rng.uniform(-0.8, 0.8, size=(4, 2))
    ring = rot + jitter + np.array([cx, cy])
    return ring


def _exposure(rng: np.random.Generator, force: str, centers: np.ndarray,
              h: int, w: int) -> np.ndarray:
    """Per-building damage exposure score driven by the force type."""
    if centers.size == 0:
        return np.zeros(0)
    cx, cy = centers[:, 0], centers[:, 1]
    if force == "wind":
        theta = rng.uniform(0.0, 2 * np.pi)
        period = rng.uniform(0.3, 0.6) * min(h, w)
        phase = rng.uniform(0.0, 2 * np.pi)
        proj = cx * np.cos(theta) + cy * np.sin(theta)
        return np.sin(2 * np.pi * proj / period + phase)
    if force == "fire":
        fx = rng.uniform(0.0, w)
        fy = rng.uniform(0.0, h)
        return -np.hypot(cx - fx, cy - fy)
    # water: low elevation (large y) floods first, with a rippled waterline
    ripple = rng.uniform(0.05, 0.15) * h
    phase = rng.uniform(0.0, 2 * np.pi)
    return cy + ripple * np.sin(2 * np.pi * cx / w + phase)


def synth_sample(spec: DomainSpec, index: int, h: int, w: int) -> Sample:
    """Deterministic sample from (spec.seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, index)))
    palette = np.asarray(spec.base_palette, dtype=np.float64)
    tex = _value_noise(rng, h, w, spec.texture_scale)
    pre = palette[None, None, :] + TEXTURE_AMP * tex[:, :, None] \
        + rng.normal(0.0, PIXEL_NOISE, size=(h, w, 3))

    count = int(rng.poisson(spec.building_density))
    rings = [_building_ring(rng, h, w) for _ in range(count)]
    colors = [rng.uniform(0.3, 0.95, size=3) for _ in range(count)]
    covers = [_ring_cover(r, h, w) for r in rings]
    for cover, color in zip(covers, colors):
        pre[cover] = color[None, :] + rng.normal(0.0, 0.02, size=(int(cover.sum()), 3))

    drawn = rng.choice(np.arange(1, 5), size=count, p=np.asarray(spec.damage_profile))
    centers = np.array([r.mean(axis=0) for r in rings]) if count else np.zeros((0, 2))
    expo = _exposure(rng, spec.force, centers, h, w)
    order = np.argsort(-expo, kind="stable")
    classes = np.zeros(count, dtype=np.int64)
    classes[order] = np.sort(drawn)[::-1]  # most exposed building takes worst damage

    annotations = [PolygonAnnotation(ring=[(float(x), float(y)) for x, y in r],
                                     damage_class=int(c), uid=f"{spec.name}_{index}_{j}")
                   for j, (r, c) in enumerate(zip(rings, classes))]
    mask = np.zeros((h, w), dtype=np.uint8)
    for cover, c in zip(covers, classes):
        np.maximum(mask, np.where(cover, np.uint8(c), np.uint8(0)), out=mask)

    rubble = np.array([0.45, 0.41, 0.36])[None, None, :] \
        + rng.uniform(-0.15, 0.15, size=(h, w, 3))
    post = pre.copy()
    m2, m3, m4 = mask == 2, mask == 3, mask == 4
    post[m2] *= 0.72
    post[m3] = 0.5 * post[m3] + 0.5 * rubble[m3]
    post[m4] = rubble[m4]
    post *= np.asarray(spec.gain_shift, dtype=np.float64)[None, None, :]

    to_u8 = lambda a: np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    return Sample(pre=to_u8(pre), post=to_u8(post), mask=mask,
                  domain_id=spec.name, sample_id=f"{spec.name}_{index:04d}")


def synth_domain(spec: DomainSpec, n: int, h: int, w: int) -> list[Sample]:
    """n deterministic samples for one domain; bytes depend only on inputs."""
    spec.validate()
    if n <= 0:
        raise ValueError("n must be positive")
    if h < 32 or w < 32:
        raise ValueError("H and W must be at least 32")
    return [synth_sample(spec, i, h, w) for i in range(n)]


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentPolicy:
    rotate: bool = False
    flip: bool = False
    rescale: tuple[float, float] | None = None
    brightness: tuple[float, float] | None = None
    contrast: tuple[float, float] | None = None
    color: tuple[float, float] | None = None
    sharpness: float | None = None

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls()

    @classmethod
    def full(cls) -> "AugmentPolicy":
        return cls(rotate=True, flip=True, rescale=(0.8, 1.25),
                   brightness=(0.8, 1.2), contrast=(0.8, 1.2), color=(0.8, 1.2),
                   sharpness=0.5)

    def to_json(self) -> dict:
        return {"rotate": self.rotate, "flip": self.flip,
                "rescale": list(self.rescale) if self.rescale else None,
                "brightness": list(self.brightness) if self.brightness else None,
                "contrast": list(self.contrast) if self.contrast else None,
                "color": list(self.color) if self.color else None,
                "sharpness": self.sharpness}

    @classmethod
    def from_json(cls, d: dict | None) -> "AugmentPolicy":
        if not d:
            return cls.identity()
        tup = lambda v: tuple(v) if v else None
        return cls(rotate=d.get("rotate", False), flip=d.get("flip", False),
                   rescale=tup(d.get("rescale")), brightness=tup(d.get("brightness")),
                   contrast=tup(d.get("contrast")), color=tup(d.get("color")),
                   sharpness=d.get("sharpness"))


def rot90_cw(arr: np.ndarray, k: int) -> np.ndarray:
    """Clockwise 90-degree steps: pixel (r,c) moves to (c, H-1-r) per step."""
    return np.rot90(arr, k=-k, axes=(0, 1))


def _fit_axis(n_src: int, n_dst: int) -> tuple[slice, slice]:
    # center crop (src larger) or center pad (src smaller)
    if n_src >= n_dst:
        off = (n_src - n_dst) // 2
        return slice(off, off + n_dst), slice(0, n_dst)
    off = (n_dst - n_src) // 2
    return slice(0, n_src), slice(off, off + n_src)


def rescale_nearest(arr: np.ndarray, s: float) -> np.ndarray:
    """Nearest-neighbor rescale by s, then center crop/zero-pad back to H,W."""
    h, w = arr.shape[:2]
    nh, nw = max(1, round(h * s)), max(1, round(w * s))
    src_r = np.minimum(((np.arange(nh) + 0.5) * (h / nh)).astype(np.int64), h - 1)
    src_c = np.minimum(((np.arange(nw) + 0.5) * (w / nw)).astype(np.int64), w - 1)
    resized = arr[src_r][:, src_c]
    out = np.zeros((h, w) + arr.shape[2:], dtype=arr.dtype)
    sr, dr = _fit_axis(nh, h)
    sc, dc = _fit_axis(nw, w)
    out[dr, dc] = resized[sr, sc]
    return out


def _box3(img: np.ndarray) -> np.ndarray:
    pad = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    acc = np.zeros_like(img)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            acc += pad[dr:dr + img.shape[0], dc:dc + img.shape[1]]
    return acc / 9.0


def augment(sample: Sample, rng: np.random.Generator,
            policy: AugmentPolicy) -> Sample:
    """Geometric ops hit pre/post/mask identically; photometric ops images only."""
    pre, post, mask = sample.pre, sample.post, sample.mask

    if policy.rotate:
        k = int(rng.integers(0, 4))
        if k:
            pre, post, mask = rot90_cw(pre, k), rot90_cw(post, k), rot90_cw(mask, k)
    if policy.flip:
        if rng.random() < 0.5:
            pre, post, mask = pre[:, ::-1], post[:, ::-1], mask[:, ::-1]
        if rng.random() < 0.5:
            pre, post, mask = pre[::-1], post[::-1], mask[::-1]
    if policy.rescale is not None:
        s = float(rng.uniform(*policy.rescale))
        pre, post, mask = rescale_nearest(pre, s), rescale_nearest(post, s), \
            rescale_nearest(mask, s)

    photometric = any(p is not None for p in
                      (policy.brightness, policy.contrast, policy.color, policy.sharpness))
    if photometric:
        imgs = [pre.astype(np.float32) / 255.0, post.astype(np.float32) / 255.0]
        if policy.brightness is not None:
            f = float(rng.uniform(*policy.brightness))
            imgs = [im * f for im in imgs]
        if policy.contrast is not None:
            f = float(rng.uniform(*policy.contrast))
            imgs = [(im - im.mean()) * f + im.mean() for im in imgs]
        if policy.color is not None:
            f = rng.uniform(*policy.color, size=3).astype(np.float32)
            imgs = [im * f[None, None, :] for im in imgs]
        if policy.sharpness is not None:
            s = float(rng.uniform(0.0, policy.sharpness))
            imgs = [im + s * (im - _box3(im)) for im in imgs]
        pre, post = [np.clip(np.round(im * 255.0), 0, 255).astype(np.uint8)
                     for im in imgs]

    return replace(sample, pre=np.ascontiguousarray(pre),
                   post=np.ascontiguousarray(post), mask=np.ascontiguousarray(mask))


# ---------------------------------------------------------------------------
# statistics & I/O

def dataset_stats(samples: list[Sample]) -> dict[str, dict]:
    """Per-domain sample counts and per-class pixel fractions."""
    if not samples:
        raise ValueError("dataset_stats on an empty dataset")
    out: dict[str, dict] = {}
    for s in samples:
        d = out.setdefault(s.domain_id, {"count": 0, "pixels": np.zeros(5, dtype=np.int64)})
        d["count"] += 1
        d["pixels"] += np.bincount(s.mask.reshape(-1), minlength=5)[:5]
    for d in out.values():
        total = d["pixels"].sum()
        d["pixel_fractions"] = d["pixels"] / total
    return out


def write_dataset(samples: list[Sample], root, domain_specs=None) -> None:
    from pathlib import Path
    root = Path(root)
    by_domain: dict[str, list[Sample]] = {}
    for s in samples:
        by_domain.setdefault(s.domain_id, []).append(s)
    spec_by_name = {sp.name: sp for sp in (domain_specs or [])}
    manifest = {"domains": [], "height": int(samples[0].pre.shape[0]),
                "width": int(samples[0].pre.shape[1])}
    for name in sorted(by_domain):
        group = by_domain[name]
        ddir = root / name
        ddir.mkdir(parents=True, exist_ok=True)
        for s in group:
            Image.fromarray(s.pre, mode="RGB").save(ddir / f"{s.sample_id}_pre.png")
            Image.fromarray(s.post, mode="RGB").save(ddir / f"{s.sample_id}_post.png")
            Image.fromarray(s.mask, mode="L").save(ddir / f"{s.sample_id}_mask.png")
        entry = {"name": name, "n": len(group)}
        if name in spec_by_name:
            entry["spec"] = spec_by_name[name].to_json()
            entry["force"] = spec_by_name[name].force
        manifest["domains"].append(entry)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(root) -> tuple[list[Sample], dict]:
    from pathlib import Path
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    samples = []
    for entry in manifest["domains"]:
        ddir = root / entry["name"]
        for pre_path in sorted(ddir.glob("*_pre.png")):
            sid = pre_path.name[:-len("_pre.png")]
            pre = np.asarray(Image.open(pre_path).convert("RGB"))
            post = np.asarray(Image.open(ddir / f"{sid}_post.png").convert("RGB"))
            mask = np.asarray(Image.open(ddir / f"{sid}_mask.png").convert("L"))
            samples.append(Sample(pre=pre, post=post, mask=mask,
                                  domain_id=entry["name"], sample_id=sid))
    return samples, manifest
