"""Synthetic cross-view scene pairs, FoV cropping, IoU labels, manifests.

Each pair is rendered from one latent scene: a ground-plane color, a sky
color, a road through the origin, and a handful of colored cylindrical
landmarks. The aerial view rasterizes the scene top-down; the ground view is
a cylindrical panorama from the scene center, columns indexed by azimuth.
Palette and azimuthal layout are shared between the two views, which is what
makes retrieval on these pairs learnable.

Images are float32 RGB in [0, 1], channel-first. On disk they are 8-bit
PNGs, so a written dataset is reproducible byte for byte from (seed, n,
sizes).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, ManifestError
from .evaluate import LabelSet

MANIFEST_VERSION = 1

POSITIVE_IOU = 0.39  # strictly greater than
SEMI_POSITIVE_RANGE = (Fraction(1, 7), Fraction(9, 23))  # inclusive


@dataclass
class ScenePair:
    """One matched ground/aerial rendering with its world tile."""

    ground: np.ndarray  # (3, Hg, Wg) float32 in [0, 1]
    aerial: np.ndarray  # (3, Ha, Wa) float32 in [0, 1]
    pair_id: int
    tile_origin: tuple  # (x, y) world units, min corner
    tile_size: float


@dataclass
class PairBatch:
    """Stacked pairs plus the in-batch semi-positive relation."""

    ground: np.ndarray  # (N, 3, Hg, Wg)
    aerial: np.ndarray  # (N, 3, Ha, Wa)
    pair_ids: np.ndarray  # (N,)
    semi_positive_mask: np.ndarray  # (N, N) bool; [i, j]: aerial j semi-pos for ground i


def _hsv_to_rgb(h, s, v):
    h = (h % 1.0) * 6.0
    i = int(h)
    f = h - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]
    return np.array(rgb, dtype=np.float64)


def _draw_scene(rng):
    n_obj = int(rng.integers(5, 10))
    base = _hsv_to_rgb(rng.uniform(), rng.uniform(0.3, 0.7), rng.uniform(0.35, 0.7))
    scene = {
        "base": base,
        # sky tracks the ground palette so both image halves carry identity
        "sky": 0.45 * base + 0.55 * np.array([0.75, 0.85, 1.0]),
        "road_angle": rng.uniform(0.0, np.pi),
        "road_width": rng.uniform(0.08, 0.14),
        "road_color": _hsv_to_rgb(rng.uniform(), rng.uniform(0.5, 0.9), rng.uniform(0.3, 0.8)),
        "theta": rng.uniform(0.0, 2 * np.pi, n_obj),
        "dist": rng.uniform(0.14, 0.40, n_obj),
        "radius": rng.uniform(0.06, 0.13, n_obj),
        "height": rng.uniform(0.8, 1.6, n_obj),
        "colors": np.stack(
            [
                _hsv_to_rgb(rng.uniform(), rng.uniform(0.7, 1.0), rng.uniform(0.6, 1.0))
                for _ in range(n_obj)
            ]
        ),
    }
    return scene


def _render_aerial(scene, hw):
    h, w = hw
    ys = 0.5 - (np.arange(h) + 0.5) / h  # north up
    xs = (np.arange(w) + 0.5) / w - 0.5
    x = xs[None, :]
    y = ys[:, None]
    img = np.broadcast_to(scene["base"], (h, w, 3)).copy()

    a = scene["road_angle"]
    road = np.abs(x * np.sin(a) - y * np.cos(a)) < scene["road_width"] / 2
    img[road] = scene["road_color"]

    ox = scene["dist"] * np.cos(scene["theta"])
    oy = scene["dist"] * np.sin(scene["theta"])
    for k in range(len(ox)):
        disk = (x - ox[k]) ** 2 + (y - oy[k]) ** 2 <= scene["radius"][k] ** 2
        img[disk] = scene["colors"][k]
    return img


def _wrap_angle(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def _render_ground(scene, hw):
    h, w = hw
    horizon = h // 3
    rows = np.arange(h)[:, None]
    az = (np.arange(w) + 0.5) * 2 * np.pi / w

    img = np.empty((h, w, 3), dtype=np.float64)
    img[:horizon] = scene["sky"]
    img[horizon:] = scene["base"]

    # the road shows up on the ground portion, at its two azimuths
    for road_az in (scene["road_angle"], scene["road_angle"] + np.pi):
        near = np.abs(_wrap_angle(az - road_az)) < 0.2
        img[horizon:, near] = scene["road_color"]

    half_ang = np.arcsin(np.clip(scene["radius"] / scene["dist"], 0.0, 1.0))
    d_ang = np.abs(_wrap_angle(az[None, :] - scene["theta"][:, None]))
    visible = d_ang <= half_ang[:, None]
    depth = np.where(visible, scene["dist"][:, None], np.inf)
    winner = depth.argmin(axis=0)
    covered = visible.any(axis=0)

    apparent = 0.7 * h * scene["radius"] * scene["height"] / scene["dist"]
    apparent = np.clip(apparent, 2.0, h - horizon - 1.0)
    top = horizon - 0.8 * apparent[winner]
    bot = horizon + 0.6 * apparent[winner]
    band = covered[None, :] & (rows >= top[None, :]) & (rows <= bot[None, :])
    img = np.where(band[:, :, None], scene["colors"][winner][None, :, :], img)
    return img


def _to_chw(img_hwc):
    return np.ascontiguousarray(img_hwc.transpose(2, 0, 1).astype(np.float32))


def generate_scene_pairs(seed, n, ground_hw=(32, 64), aerial_hw=(32, 32)):
    """Render ``n`` pairs deterministically from ``seed``.

    Tiles are laid out on a disjoint grid (spacing twice the tile size), so
    distinct pairs never overlap and the diagonal-positive batch convention
    holds exactly.
    """
    if n < 1:
        raise ContractError("need at least one pair")
    children = np.random.SeedSequence(seed).spawn(n)
    pairs = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        scene = _draw_scene(rng)
        pairs.append(
            ScenePair(
                ground=_to_chw(_render_ground(scene, ground_hw)),
                aerial=_to_chw(_render_aerial(scene, aerial_hw)),
                pair_id=i,
                tile_origin=(2.0 * i, 0.0),
                tile_size=1.0,
            )
        )
    return pairs


def layout_statistic(image):
    """Fixed hand-coded palette summary: 8-bin per-channel histograms.

    View-geometry-free, so matched ground/aerial renderings of one scene
    correlate strongly while unrelated scenes do not.
    """
    bins = np.linspace(0.0, 1.0, 9)
    hists = [np.histogram(image[c], bins=bins)[0] for c in range(3)]
    v = np.concatenate(hists).astype(np.float64)
    return v / v.sum()


def make_pair_batch(pairs):
    """Stack pairs and derive the semi-positive relation from tile geometry."""
    ids = [p.pair_id for p in pairs]
    if len(set(ids)) != len(ids):
        raise ContractError("batch must contain distinct pair ids")
    sizes = {p.tile_size for p in pairs}
    n = len(pairs)
    semi = np.zeros((n, n), dtype=bool)
    if len(sizes) == 1:
        tiles = [(p.tile_origin[0], p.tile_origin[1], p.tile_size) for p in pairs]
        for i in range(n):
            label = iou_label(tiles[i], tiles)
            for j in label.semi_positives:
                semi[i, j] = True
    return PairBatch(
        ground=np.stack([p.ground for p in pairs]),
        aerial=np.stack([p.aerial for p in pairs]),
        pair_ids=np.asarray(ids),
        semi_positive_mask=semi,
    )


# ---------------------------------------------------------------------------
# field-of-view cropping
# ---------------------------------------------------------------------------


def fov_crop(panorama, fov_deg, orientation_deg=0.0):
    """Horizontal crop of ``round(W * fov/360)`` columns starting at the
    column for ``orientation_deg``, wrapping across the seam."""
    if not 0 < fov_deg <= 360:
        raise ContractError(f"fov must be in (0, 360], got {fov_deg}")
    w = panorama.shape[-1]
    width = int(round(w * fov_deg / 360.0))
    if width < 1:
        raise ContractError(f"fov {fov_deg} deg spans less than one column at W={w}")
    start = int(round(w * (orientation_deg % 360.0) / 360.0))
    cols = (start + np.arange(width)) % w
    return np.ascontiguousarray(panorama[..., cols])


# ---------------------------------------------------------------------------
# IoU labeling
# ---------------------------------------------------------------------------


def tile_iou(a, b):
    """IoU of two axis-aligned equal-size squares given as (x, y, size)."""
    ax, ay, s = a
    bx, by, s2 = b
    if s != s2:
        raise ContractError("tiles must have equal size")
    if s <= 0:
        raise ContractError("tile size must be positive")
    ox = max(0.0, s - abs(ax - bx))
    oy = max(0.0, s - abs(ay - by))
    inter = ox * oy
    union = 2.0 * s * s - inter
    return inter / union


def iou_label(query_tile, reference_tiles):
    """Classify references against a query tile by overlap.

    IoU strictly greater than 0.39 is positive; IoU inside [1/7, 9/23]
    (inclusive ends) is semi-positive; everything else is negative. The
    positive rule wins where the ranges overlap.
    """
    lo, hi = float(SEMI_POSITIVE_RANGE[0]), float(SEMI_POSITIVE_RANGE[1])
    positives, semi = set(), set()
    for j, ref in enumerate(reference_tiles):
        iou = tile_iou(query_tile, ref)
        if iou > POSITIVE_IOU:
            positives.add(j)
        elif lo <= iou <= hi:
            semi.add(j)
    return LabelSet(positives=frozenset(positives), semi_positives=frozenset(semi))


# ---------------------------------------------------------------------------
# manifests and on-disk datasets
# ---------------------------------------------------------------------------

_ITEM_FIELDS = ("pair_id", "ground_path", "aerial_path", "tile_origin", "tile_size")


def save_manifest(manifest, path):
    """Write a manifest document; schema-validated before writing."""
    _validate_manifest(manifest, check_files=False, base=None)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(path, check_files=True):
    """Read and validate a manifest; errors name the offending field/item."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e}") from e
    _validate_manifest(manifest, check_files=check_files, base=path.parent)
    return manifest


def _validate_manifest(manifest, check_files, base):
    if not isinstance(manifest, dict):
        raise ManifestError("manifest root must be an object")
    version = manifest.get("version")
    if version != MANIFEST_VERSION:
        raise ManifestError(
            f"unsupported manifest version {version!r} (expected {MANIFEST_VERSION})"
        )
    if "split" not in manifest:
        raise ManifestError("manifest missing field 'split'")
    items = manifest.get("items")
    if not isinstance(items, list):
        raise ManifestError("manifest missing field 'items'")
    seen = set()
    for item in items:
        pid = item.get("pair_id")
        for field_name in _ITEM_FIELDS:
            if field_name not in item:
                raise ManifestError(f"item pair_id={pid!r} missing field '{field_name}'")
        if pid in seen:
            raise ManifestError(f"duplicate pair_id {pid}")
        seen.add(pid)
        if check_files:
            for key in ("ground_path", "aerial_path"):
                p = base / item[key]
                if not p.exists():
                    raise ManifestError(f"item pair_id={pid}: {key} does not exist: {p}")


def _save_png(image_chw, path):
    arr = np.round(image_chw.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _load_png(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_dataset(pairs, out_dir, split="all"):
    """Write PNGs plus manifest.json under ``out_dir``; returns manifest path."""
    out = Path(out_dir)
    (out / "ground").mkdir(parents=True, exist_ok=True)
    (out / "aerial").mkdir(parents=True, exist_ok=True)
    items = []
    for p in pairs:
        gpath = f"ground/{p.pair_id:05d}.png"
        apath = f"aerial/{p.pair_id:05d}.png"
        _save_png(p.ground, out / gpath)
        _save_png(p.aerial, out / apath)
        items.append(
            {
                "pair_id": p.pair_id,
                "ground_path": gpath,
                "aerial_path": apath,
                "tile_origin": list(p.tile_origin),
                "tile_size": p.tile_size,
            }
        )
    manifest = {"version": MANIFEST_VERSION, "split": split, "items": items}
    manifest_path = out / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path


def load_dataset(manifest_path):
    """Decode a written dataset back into ScenePair objects."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    pairs = []
    for item in manifest["items"]:
        pairs.append(
            ScenePair(
                ground=_load_png(base / item["ground_path"]),
                aerial=_load_png(base / item["aerial_path"]),
                pair_id=int(item["pair_id"]),
                tile_origin=tuple(item["tile_origin"]),
                tile_size=float(item["tile_size"]),
            )
        )
    return pairs
