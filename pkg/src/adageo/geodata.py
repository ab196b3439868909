"""Geotagged image datasets, the synthetic multi-domain benchmark, and triplet mining."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

POSITIVE_RADIUS = 10.0
NEGATIVE_RADIUS = 25.0
N_NEGATIVES = 10
MANIFEST_HEADER = ["id", "x", "y", "domain", "split", "role", "category", "filename"]
SPLITS = ("train", "val", "test")
ROLES = ("gallery", "query")


@dataclass(frozen=True)
class DomainLabel:
    """``source``, ``pseudo:<target>`` or ``target:<target>``."""

    kind: str
    name: str = ""

    KINDS = ("source", "pseudo", "target")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if (self.kind == "source") != (self.name == ""):
            raise ValueError(f"domain {self.kind!r} with name {self.name!r}")

    @classmethod
    def parse(cls, text: str) -> "DomainLabel":
        text = text.strip()
        if text == "source":
            return cls("source")
        kind, sep, name = text.partition(":")
        if not sep or not name:
            raise ValueError(f"malformed domain {text!r}")
        return cls(kind, name)

    @property
    def index(self) -> int:
        """Discriminator class: 0 source, 1 pseudo-target, 2 target."""
        return self.KINDS.index(self.kind)

    def __str__(self) -> str:
        return "source" if self.kind == "source" else f"{self.kind}:{self.name}"


SOURCE = DomainLabel("source")


@dataclass
class GeoImage:
    id: int
    x: float
    y: float
    domain: DomainLabel
    split: str
    role: str
    category: int
    pixels: np.ndarray | None = field(default=None, repr=False)
    filename: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"image {self.id}: non-finite position")
        if self.split not in SPLITS:
            raise ValueError(f"image {self.id}: bad split {self.split!r}")
        if self.role not in ROLES:
            raise ValueError(f"image {self.id}: bad role {self.role!r}")
        if self.pixels is not None and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError(f"image {self.id}: pixels outside [0, 1]")

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


class GeoDataset:
    def __init__(self, images: Iterable[GeoImage], root: Path | None = None):
        self.images: list[GeoImage] = list(images)
        self.root = root
        self.by_id: dict[int, GeoImage] = {}
        for im in self.images:
            if im.id in self.by_id:
                raise ValueError(f"duplicate image id {im.id}")
            self.by_id[im.id] = im
        self.dropped: list[int] = []

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def select(self, split=None, role=None, domain=None) -> list[GeoImage]:
        dom = DomainLabel.parse(domain) if isinstance(domain, str) else domain
        return [im for im in self.images
                if (split is None or im.split == split)
                and (role is None or im.role == role)
                and (dom is None or im.domain == dom)]

    def gallery(self, split: str) -> list[GeoImage]:
        return self.select(split=split, role="gallery")

    def queries(self, split: str, domain=SOURCE) -> list[GeoImage]:
        return self.select(split=split, role="query", domain=domain)

    def target_domains(self) -> list[str]:
        return sorted({im.domain.name for im in self.images if im.domain.kind == "target"})

    def extend(self, images: Iterable[GeoImage]) -> "GeoDataset":
        return GeoDataset(self.images + list(images), self.root)

    def next_id(self) -> int:
        return max(self.by_id, default=-1) + 1


def stack_pixels(images: Sequence[GeoImage]) -> np.ndarray:
    """(N, 3, H, W) float64 batch."""
    return np.stack([im.pixels for im in images]).transpose(0, 3, 1, 2).astype(np.float64)


# ---------------------------------------------------------------- geometry

def planar_distance(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def latlon_to_local(lat, lon, lat0, lon0, radius=6_371_008.8):
    """Equirectangular projection of (lat, lon) degrees to meters around (lat0, lon0).

    Hook for real-world data; adequate over city-sized extents.
    """
    x = math.radians(lon - lon0) * radius * math.cos(math.radians(lat0))
    y = math.radians(lat - lat0) * radius
    return x, y


def _positions(images: Sequence[GeoImage]) -> np.ndarray:
    return np.array([[im.x, im.y] for im in images], dtype=np.float64).reshape(-1, 2)


def geo_partition(query: GeoImage, gallery: Sequence[GeoImage],
                  pos_radius: float = POSITIVE_RADIUS, neg_radius: float = NEGATIVE_RADIUS):
    """Split ``gallery`` into (positives <= pos_radius, negatives > neg_radius)."""
    if len(gallery) == 0:
        raise ValueError("geo_partition: empty gallery")
    d = [planar_distance(query.position, g.position) for g in gallery]
    pos = [g for g, di in zip(gallery, d) if di <= pos_radius]
    neg = [g for g, di in zip(gallery, d) if di > neg_radius]
    return pos, neg


@dataclass
class TripletTuple:
    query: GeoImage
    positive: GeoImage
    negatives: list[GeoImage]

    def __post_init__(self):
        if planar_distance(self.query.position, self.positive.position) > POSITIVE_RADIUS:
            raise ValueError("triplet positive farther than 10 m")
        if len(self.negatives) != N_NEGATIVES:
            raise ValueError(f"triplet needs {N_NEGATIVES} negatives, got {len(self.negatives)}")
        for n in self.negatives:
            if planar_distance(self.query.position, n.position) <= NEGATIVE_RADIUS:
                raise ValueError(f"triplet negative {n.id} within 25 m")


def mine_triplet(query: GeoImage, descriptor_cache: dict, gallery: Sequence[GeoImage],
                 pool: int = 100, rng: np.random.Generator | None = None,
                 n_negatives: int = N_NEGATIVES) -> TripletTuple | None:
    """Best positive plus the hardest ``n_negatives`` from a random pool of geographic negatives.

    Returns None when the query has no geographic positive.
    """
    positives, negatives = geo_partition(query, gallery)
    if not positives:
        logger.debug("query %d has no positive, skipped", query.id)
        return None
    if len(negatives) < n_negatives:
        raise ValueError(f"query {query.id}: only {len(negatives)} geographic negatives")
    q = descriptor_cache[query.id]

    def dist(g):
        return float(np.linalg.norm(descriptor_cache[g.id] - q))

    best = min(positives, key=lambda g: (dist(g), g.id))
    if rng is not None and pool < len(negatives):
        pick = rng.choice(len(negatives), size=pool, replace=False)
        negatives = [negatives[i] for i in sorted(pick)]
    hardest = sorted(negatives, key=lambda g: (dist(g), g.id))[:n_negatives]
    return TripletTuple(query, best, hardest)


# ---------------------------------------------------------------- synthetic benchmark

@dataclass
class SynthConfig:
    places: int = 200
    spacing: float = 40.0
    position_jitter: float = 2.0
    query_radius: float = 6.0
    image_size: int = 64
    categories: int = 4
    domains: tuple = ("night", "rain", "overcast", "sun", "snow")
    split_fractions: tuple = (0.5, 0.15, 0.35)
    queries_per_place: int = 1
    val_queries_per_place: int = 3
    test_queries_per_place: int = 3
    target_train_per_place: int = 1
    clutter: int = 4          # transient street objects per capture
    clouds: int = 3           # transient sky blobs per capture, behind the buildings
    category_color: bool = False

    def check(self) -> None:
        if self.places < 2:
            raise ValueError("synthetic data needs at least 2 places")
        if self.query_radius + self.position_jitter > POSITIVE_RADIUS:
            raise ValueError("query_radius + position_jitter must be <= 10 m so every query has a positive")
        if self.spacing - 2 * self.position_jitter - self.query_radius <= NEGATIVE_RADIUS:
            raise ValueError(
                f"infeasible geometry: spacing {self.spacing} m leaves neighbouring places within "
                f"{NEGATIVE_RADIUS} m of a query")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.categories < 2:
            raise ValueError("need at least 2 categories")
        unknown = set(self.domains) - set(DOMAIN_TRANSFORMS)
        if unknown:
            raise ValueError(f"unknown target domains {sorted(unknown)}")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1) > 1e-9:
            raise ValueError("split_fractions must be three numbers summing to 1")


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


_STREAM = {"scene": 0, "gallery": 1, "query": 2, "domain": 3, "layout": 4}
_DOMAIN_CODE = {"night": 1, "rain": 2, "overcast": 3, "sun": 4, "snow": 5}


def _hsv(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - math.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


@dataclass
class _Scene:
    sky: np.ndarray
    ground: np.ndarray
    horizon: float
    buildings: list  # (x0, x1, top, color, window_color, style, period)
    landmark: tuple  # (cx, cy, r, color)


def _make_scene(place: int, category: int, categories: int, seed: int, category_color: bool = False) -> _Scene:
    # the category fixes the window pattern; facade hue follows it only with category_color
    rng = _rng(seed, _STREAM["scene"], place)
    hue = (category / categories + rng.normal(0, 0.02)) % 1.0
    if not category_color:
        hue = rng.uniform(0, 1)
    sky = _hsv(0.55 + rng.normal(0, 0.03), rng.uniform(0.2, 0.5), rng.uniform(0.75, 0.95))
    ground = _hsv(rng.uniform(0, 1), rng.uniform(0.0, 0.2), rng.uniform(0.3, 0.5))
    horizon = rng.uniform(0.78, 0.86)
    n = int(rng.integers(3, 6))
    cuts = np.sort(rng.uniform(0, 1, n - 1))
    edges = np.concatenate([[0.0], cuts, [1.0]])
    style = category % 4
    buildings = []
    for i in range(n):
        top = rng.uniform(0.15, 0.5)
        color = _hsv((hue + rng.normal(0, 0.06)) % 1.0, rng.uniform(0.35, 0.9), rng.uniform(0.35, 0.9))
        wcolor = _hsv(rng.uniform(0, 1), rng.uniform(0.1, 0.6), rng.uniform(0.1, 0.95))
        period = rng.uniform(0.05, 0.11)
        buildings.append((edges[i], edges[i + 1], top, color, wcolor, style, period))
    landmark = (rng.uniform(0.1, 0.9), rng.uniform(0.3, 0.6), rng.uniform(0.04, 0.09),
                _hsv(rng.uniform(0, 1), rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)))
    return _Scene(sky, ground, horizon, buildings, landmark)


def _render(scene: _Scene, size: int, shift: float, rng: np.random.Generator,
            clutter: int, clouds: int = 0) -> np.ndarray:
    """Render the scene as seen with a horizontal view offset ``shift`` (fraction of width)."""
    H = W = size
    ys = (np.arange(H) + 0.5) / H
    # canvas spans [-0.25, 1.25]; the view window covers [shift, shift + 1] scaled into [0, 1]
    xs = 0.125 + shift + (np.arange(W) + 0.5) / W * 0.75
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    img = np.empty((H, W, 3))
    img[:] = scene.sky * (0.85 + 0.15 * ys[:, None, None])
    for _ in range(clouds):
        ccx, ccy = rng.uniform(0, 1), rng.uniform(0.02, 0.35)
        rx, ry = rng.uniform(0.08, 0.2), rng.uniform(0.03, 0.08)
        cm = ((X - 0.125 - shift) / 0.75 - ccx) ** 2 / rx ** 2 + (Y - ccy) ** 2 / ry ** 2 < 1
        img[cm] = 0.5 * img[cm] + 0.5 * rng.uniform(0.75, 1.0)
    for x0, x1, top, color, wcolor, style, period in scene.buildings:
        m = (X >= x0) & (X < x1) & (Y >= top) & (Y < scene.horizon)
        img[m] = color
        u = ((X - x0) / period) % 1.0
        v = ((Y - top) / period) % 1.0
        if style == 0:
            win = (u > 0.3) & (u < 0.7) & (v > 0.3) & (v < 0.7)
        elif style == 1:
            win = (u > 0.35) & (u < 0.65)
        elif style == 2:
            win = (v > 0.4) & (v < 0.7)
        else:
            win = (u > 0.15) & (u < 0.85) & (v > 0.15) & (v < 0.85) & ((Y - top) > 0.08)
        img[m & win] = wcolor
    cx, cy, r, lcolor = scene.landmark
    img[(X - cx) ** 2 + (Y - cy) ** 2 < r * r] = lcolor
    img[Y >= scene.horizon] = scene.ground
    # transient clutter: parked cars and poles that differ between captures
    for _ in range(clutter):
        cw, ch = rng.uniform(0.08, 0.2), rng.uniform(0.05, 0.1)
        cxp = rng.uniform(0, 1 - cw)
        cyp = scene.horizon + rng.uniform(-0.06, 0.04)
        color = _hsv(rng.uniform(0, 1), rng.uniform(0.3, 1), rng.uniform(0.2, 1))
        xv = (np.arange(W) + 0.5) / W
        car = (Y >= cyp) & (Y < cyp + ch) & (xv[None, :] >= cxp) & (xv[None, :] < cxp + cw)
        img[car] = color
    img *= rng.uniform(0.92, 1.08)
    img += rng.normal(0, 0.015, img.shape)
    return np.clip(img, 0.0, 1.0)


def _night(img, rng):
    out = img * np.array([0.22, 0.26, 0.42]) + 0.02
    glow = rng.uniform(0, 1, img.shape[:2]) > 0.985
    out[glow] = np.array([0.9, 0.8, 0.45])
    return out + rng.normal(0, 0.02, img.shape)


def _rain(img, rng):
    gray = img.mean(axis=2, keepdims=True)
    out = 0.45 * img + 0.55 * gray
    out = out * 0.8 + 0.05
    H, W = img.shape[:2]
    streak = np.zeros((H, W))
    for _ in range(max(4, W // 6)):
        x, y0 = int(rng.integers(0, W)), int(rng.integers(0, H))
        for k in range(max(3, H // 8)):
            yy, xx = y0 + k, x + k // 3
            if yy < H and xx < W:
                streak[yy, xx] = 1.0
    out = out + 0.3 * streak[:, :, None]
    return out + rng.normal(0, 0.03, img.shape)


def _overcast(img, rng):
    gray = img.mean(axis=2, keepdims=True)
    return 0.5 * (0.6 * img + 0.4 * gray) + 0.38 + rng.normal(0, 0.015, img.shape)


def _sun(img, rng):
    H, W = img.shape[:2]
    cy, cx = rng.uniform(0, 0.3) * H, rng.uniform(0, 1) * W
    yy, xx = np.mgrid[0:H, 0:W]
    glare = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (0.35 * W) ** 2))
    out = 1.35 * (img - 0.5) + 0.55
    out = out + glare[:, :, None] * np.array([0.45, 0.3, 0.05])
    return out * np.array([1.08, 1.0, 0.82]) + rng.normal(0, 0.015, img.shape)


def _snow(img, rng):
    out = 0.5 * img + 0.45
    flakes = rng.uniform(0, 1, img.shape[:2]) > 0.96
    out[flakes] = 1.0
    return out + rng.normal(0, 0.02, img.shape)


DOMAIN_TRANSFORMS = {"night": _night, "rain": _rain, "overcast": _overcast, "sun": _sun, "snow": _snow}


def apply_domain(img: np.ndarray, domain: str, rng: np.random.Generator) -> np.ndarray:
    return np.clip(DOMAIN_TRANSFORMS[domain](img, rng), 0.0, 1.0)


def _layout(config: SynthConfig, seed: int):
    rng = _rng(seed, _STREAM["layout"])
    cols = math.ceil(math.sqrt(config.places))
    idx = np.arange(config.places)
    base = np.stack([(idx % cols) * config.spacing, (idx // cols) * config.spacing], axis=1).astype(float)
    ang = rng.uniform(0, 2 * np.pi, config.places)
    rad = config.position_jitter * np.sqrt(rng.uniform(0, 1, config.places))
    pos = base + np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    cats = rng.integers(0, config.categories, config.places)
    order = rng.permutation(config.places)
    n_train = max(N_NEGATIVES + 1, int(round(config.split_fractions[0] * config.places)))
    n_val = int(round(config.split_fractions[1] * config.places))
    split = np.empty(config.places, dtype=object)
    split[order[:n_train]] = "train"
    split[order[n_train:n_train + n_val]] = "val"
    split[order[n_train + n_val:]] = "test"
    return pos, cats, split


def render_dataset(config: SynthConfig, seed: int) -> GeoDataset:
    """Build the benchmark in memory; a pure function of (config, seed)."""
    config.check()
    pos, cats, split = _layout(config, seed)
    size = config.image_size
    # the rendered view spans 0.75 of a 1.5-wide canvas; 1 canvas unit ~ 2 * spacing meters
    m_to_shift = 1.0 / (2.0 * config.spacing) * 0.5
    images: list[GeoImage] = []

    def add(place, x, y, domain, role, pixels):
        # stored at 8-bit precision so a PNG round trip is lossless
        images.append(GeoImage(len(images), float(x), float(y), domain, str(split[place]), role,
                               int(cats[place]), quantize(pixels)))

    for p in range(config.places):
        scene = _make_scene(p, int(cats[p]), config.categories, seed, config.category_color)
        add(p, pos[p, 0], pos[p, 1], SOURCE, "gallery",
            _render(scene, size, 0.0, _rng(seed, _STREAM["gallery"], p), config.clutter, config.clouds))
        sp = split[p]
        n_src = {"train": config.queries_per_place, "val": config.val_queries_per_place,
                 "test": config.test_queries_per_place}[sp]
        n_tgt = {"train": config.target_train_per_place, "val": 0,
                 "test": config.test_queries_per_place}[sp]
        for qi in range(max(n_src, n_tgt)):
            qrng = _rng(seed, _STREAM["query"], p, qi)
            ang, rad = qrng.uniform(0, 2 * np.pi), config.query_radius * math.sqrt(qrng.uniform(0, 1))
            dx, dy = rad * math.cos(ang), rad * math.sin(ang)
            base_img = _render(scene, size, dx * m_to_shift, qrng, config.clutter, config.clouds)
            if qi < n_src:
                add(p, pos[p, 0] + dx, pos[p, 1] + dy, SOURCE, "query", base_img)
            if qi < n_tgt:
                for d in config.domains:
                    drng = _rng(seed, _STREAM["domain"], p, qi, _DOMAIN_CODE[d])
                    add(p, pos[p, 0] + dx, pos[p, 1] + dy, DomainLabel("target", d), "query",
                        apply_domain(base_img, d, drng))
    return GeoDataset(images)


# ---------------------------------------------------------------- manifest I/O

@dataclass
class Manifest:
    path: Path
    rows: list[dict]

    @property
    def root(self) -> Path:
        return self.path.parent


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)


def quantize(pixels: np.ndarray) -> np.ndarray:
    return to_uint8(pixels) / 255.0


def write_image(path: Path, pixels: np.ndarray) -> None:
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path, format="PNG", optimize=False)


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_manifest(dataset: GeoDataset, out_dir, image_dir: str = "images",
                   only: Iterable[GeoImage] | None = None, append: bool = False) -> Manifest:
    """Write images as 8-bit PNG and the CSV manifest into ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / image_dir).mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.csv"
    rows = []
    for im in (dataset.images if only is None else only):
        fname = im.filename or f"{image_dir}/{im.id:06d}.png"
        write_image(out_dir / fname, im.pixels)
        rows.append({"id": im.id, "x": repr(float(im.x)), "y": repr(float(im.y)), "domain": str(im.domain),
                     "split": im.split, "role": im.role, "category": im.category, "filename": fname})
    mode = "a" if append and path.exists() else "w"
    with path.open(mode, newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_HEADER, lineterminator="\n")
        if mode == "w":
            w.writeheader()
        w.writerows(rows)
    return Manifest(path, rows)


def generate_synthetic(config: SynthConfig, seed: int, out_dir) -> Manifest:
    return write_manifest(render_dataset(config, seed), out_dir)


def load_manifest(path) -> GeoDataset:
    """Read and validate a manifest; drop queries that cannot be localized.

    A query is dropped when no same-split gallery image lies within 25 m;
    a train query additionally needs a gallery image within 10 m.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    images, seen = [], set()
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ValueError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                iid = int(row["id"])
                if iid in seen:
                    raise ValueError(f"duplicate id {iid}")
                seen.add(iid)
                fpath = root / row["filename"]
                if not fpath.exists():
                    raise ValueError(f"missing image file {row['filename']}")
                images.append(GeoImage(iid, float(row["x"]), float(row["y"]),
                                       DomainLabel.parse(row["domain"]), row["split"], row["role"],
                                       int(row["category"]), read_image(fpath), row["filename"]))
            except (ValueError, TypeError, KeyError) as exc:
                raise ValueError(f"{path}: row {lineno}: {exc}") from None
    ds = GeoDataset(images, root)
    return drop_unlocalizable(ds)


def drop_unlocalizable(ds: GeoDataset) -> GeoDataset:
    keep, dropped = [], []
    galleries = {s: _positions(ds.gallery(s)) for s in SPLITS}
    for im in ds.images:
        if im.role == "query":
            g = galleries[im.split]
            d = np.hypot(*(g - np.array(im.position)).T) if len(g) else np.array([np.inf])
            need = POSITIVE_RADIUS if im.split == "train" else NEGATIVE_RADIUS
            if d.min() > need:
                dropped.append(im.id)
                continue
        keep.append(im)
    if dropped:
        logger.info("dropped %d queries without a gallery positive", len(dropped))
    out = GeoDataset(keep, ds.root)
    out.dropped = dropped
    return out


def relabel(images: Sequence[GeoImage], start_id: int, domain: DomainLabel,
            pixels: Sequence[np.ndarray]) -> list[GeoImage]:
    """Copies of ``images`` with new ids, a new domain and new pixels; positions kept verbatim."""
    return [replace(im, id=start_id + i, domain=domain, pixels=px, filename="")
            for i, (im, px) in enumerate(zip(images, pixels))]
