"""Procedural triplet generator.

Renders parametric 2.5D products (8 shape families, analytic silhouettes
with view-angle foreshortening, procedural logos, curvature shading) and
composes them into parametric scenes (background | lighting | surface
class tokens, explicit placement). Each dataset item is a triplet: product
image + exact silhouette mask, scene tokens, and the target ad image with
the product rendered at the target view under scene lighting.

Product images and masks are stored placement-aligned in target-image
coordinates (the analog of segmenting the product out of the ad), so the
record's mask doubles as the generation-time spatial condition.

Everything is a pure function of the specs: same spec, same bytes.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataIOError, InvalidConfigError
from .images import write_pgm, write_ppm

CATEGORIES = ("bottle", "can", "box", "cup", "flask", "jar", "pouch", "tube")
GLYPHS = ("disc", "square", "triangle", "bar", "ring")
BACKGROUNDS = ("studio", "sunset", "forest", "night")
LIGHTINGS = ("neutral", "warm_left", "cool_right")
SURFACES = ("matte", "gloss", "wood")

SCENE_FAMILIES = {"background": BACKGROUNDS, "lighting": LIGHTINGS, "surface": SURFACES}
TOKEN_OFFSETS = {"background": 0, "lighting": len(BACKGROUNDS),
                 "surface": len(BACKGROUNDS) + len(LIGHTINGS)}
VOCAB_SIZE = sum(len(v) for v in SCENE_FAMILIES.values())

# cup has a side handle, so its silhouette is not mirror-symmetric
SYMMETRIC_CATEGORIES = tuple(c for c in CATEGORIES if c != "cup")

VIEW_ANGLE_LIMIT = 45.0
SIZE_RANGE = (0.55, 0.80)
FLOOR_Y = 0.80

LIGHT_TINTS = {
    "neutral": (1.0, 1.0, 1.0),
    "warm_left": (1.10, 1.00, 0.88),
    "cool_right": (0.88, 0.97, 1.10),
}
LIGHT_RAMP = {"neutral": 0.0, "warm_left": -0.5, "cool_right": 0.5}
LIGHT_RAMP_STRENGTH = 0.5


@dataclass
class ProductSpec:
    category: str
    body_hsv: tuple
    accent_hsv: tuple
    glyph: str
    logo_u: float  # logo azimuth offset, radians-ish in [-0.35, 0.35]
    logo_v: float  # vertical logo position in body coords [-0.5, 0.3]
    size_fraction: float
    view_angle_deg: float

    def validate(self):
        if self.category not in CATEGORIES:
            raise InvalidConfigError(f"unknown category {self.category!r}")
        if self.glyph not in GLYPHS:
            raise InvalidConfigError(f"unknown glyph {self.glyph!r}")
        if not (-0.35 <= self.logo_u <= 0.35 and -0.5 <= self.logo_v <= 0.3):
            raise InvalidConfigError(f"logo position out of range: ({self.logo_u}, {self.logo_v})")
        if not SIZE_RANGE[0] <= self.size_fraction <= SIZE_RANGE[1]:
            raise InvalidConfigError(f"size fraction {self.size_fraction} outside {SIZE_RANGE}")
        if abs(self.view_angle_deg) > VIEW_ANGLE_LIMIT:
            raise InvalidConfigError(f"view angle {self.view_angle_deg} outside +-{VIEW_ANGLE_LIMIT}")
        for hsv in (self.body_hsv, self.accent_hsv):
            if not all(0.0 <= x <= 1.0 for x in hsv):
                raise InvalidConfigError(f"hsv out of range: {hsv}")


@dataclass
class SceneSpec:
    background: str
    lighting: str
    surface: str
    center: tuple  # (cx, cy) fractions of the frame
    scale: float   # product box side as a fraction of the frame

    def validate(self):
        for fam, val in (("background", self.background), ("lighting", self.lighting),
                         ("surface", self.surface)):
            if val not in SCENE_FAMILIES[fam]:
                raise InvalidConfigError(f"unknown {fam} token {val!r}")
        cx, cy = self.center
        half = self.scale / 2.0
        if not (cx - half >= 0.0 and cx + half <= 1.0 and cy - half >= 0.0 and cy + half <= 1.0):
            raise InvalidConfigError(
                f"placement (center={self.center}, scale={self.scale}) leaves the frame"
            )

    def token_ids(self) -> np.ndarray:
        return np.array([
            TOKEN_OFFSETS["background"] + BACKGROUNDS.index(self.background),
            TOKEN_OFFSETS["lighting"] + LIGHTINGS.index(self.lighting),
            TOKEN_OFFSETS["surface"] + SURFACES.index(self.surface),
        ], dtype=np.int64)

    def tokens(self) -> dict:
        return {"background": self.background, "lighting": self.lighting, "surface": self.surface}


@dataclass
class TripletRecord:
    id: str
    category: str
    scene_tokens: dict
    product_path: str
    mask_path: str
    target_path: str
    parent_id: str | None = None
    view_delta_deg: float = 0.0
    degradation: dict | None = None


# ---------------------------------------------------------------------------
# silhouette profiles


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _half_width(category: str, v: np.ndarray) -> np.ndarray:
    """Half-width of the silhouette as a function of height v in [-1, 1]
    (v=-1 top). Values are fractions of the unit body box."""
    if category == "bottle":
        neck = 0.18
        body = 0.56
        w = neck + (body - neck) * _smoothstep((v + 0.55) / 0.5)
        return w * (1.0 - 0.08 * _smoothstep((v - 0.7) / 0.3))
    if category == "can":
        cap = 1.0 - 0.5 * np.clip(np.abs(v) - 0.88, 0.0, 0.12) / 0.12
        return 0.52 * cap
    if category == "box":
        return np.full_like(v, 0.62)
    if category == "cup":
        return 0.58 - 0.24 * (v + 1.0) / 2.0
    if category == "flask":
        return 0.14 + 0.52 * _smoothstep((v + 1.0) / 1.6)
    if category == "jar":
        neck = 0.30
        body = 0.60
        w = neck + (body - neck) * _smoothstep((v + 0.8) / 0.35)
        return w * (1.0 - 0.10 * _smoothstep((v - 0.6) / 0.4))
    if category == "pouch":
        return 0.34 + 0.22 * _smoothstep((v + 1.0) / 1.8)
    if category == "tube":
        w = np.full_like(v, 0.26)
        return np.where(v > 0.72, 0.32, w)
    raise InvalidConfigError(f"unknown category {category!r}")


def _body_fields(spec: ProductSpec, theta_deg: float, n: int):
    """Analytic raster of the product body on an n x n unit grid.

    Returns (rgb float [0,1], alpha bool). Horizontal rotation is
    approximated by silhouette foreshortening plus logo/shading shift."""
    theta = np.deg2rad(theta_deg)
    cos_t = max(np.cos(theta), 1e-3)
    coords = (np.arange(n, dtype=np.float64) + 0.5) / n * 2.0 - 1.0
    u = coords[None, :].repeat(n, axis=0)
    v = coords[:, None].repeat(n, axis=1)

    vspan = 0.96  # small vertical margin inside the box
    v_body = v / vspan
    in_v = np.abs(v_body) <= 1.0
    w = _half_width(spec.category, np.clip(v_body, -1.0, 1.0)) * cos_t
    inside = in_v & (np.abs(u) <= w)

    if spec.category == "cup":  # handle ring on the right-hand side
        hu = (u - (w + 0.14 * cos_t)) / (0.16 * cos_t)
        hv = (v_body + 0.1) / 0.32
        ring = np.abs(np.sqrt(hu ** 2 + hv ** 2) - 1.0) <= 0.28
        inside = inside | (ring & in_v)

    # curvature shading with a view-dependent highlight
    safe_w = np.maximum(w, 1e-6)
    un = np.clip(u / safe_w, -1.0, 1.0)
    lam = 0.72 + 0.34 * np.sqrt(np.clip(1.0 - un ** 2, 0.0, 1.0))
    highlight_pos = -0.30 + 0.45 * np.sin(theta)
    lam = lam + 0.16 * np.exp(-((un - highlight_pos) / 0.22) ** 2)
    lam = lam * (1.0 - 0.10 * (v_body + 1.0) / 2.0)

    body_rgb = np.array(colorsys.hsv_to_rgb(*spec.body_hsv))
    rgb = lam[..., None] * body_rgb[None, None, :]

    # logo glyph painted on the front face, shifted by the view azimuth
    az = spec.logo_u + np.sin(theta) * 0.9
    gu = (u - np.sin(az) * safe_w * 0.72) / (safe_w * np.maximum(np.cos(az), 0.15))
    gv = (v_body - spec.logo_v) / 0.22
    r2 = gu ** 2 + gv ** 2
    glyph = spec.glyph
    if glyph == "disc":
        in_logo = r2 <= 1.0
    elif glyph == "ring":
        in_logo = (r2 <= 1.0) & (r2 >= 0.45)
    elif glyph == "square":
        in_logo = (np.abs(gu) <= 0.85) & (np.abs(gv) <= 0.85)
    elif glyph == "bar":
        in_logo = (np.abs(gu) <= 1.0) & (np.abs(gv) <= 0.38)
    else:  # triangle
        in_logo = (gv >= -0.9) & (gv <= 0.9) & (np.abs(gu) <= (0.9 - gv) * 0.6)
    in_logo = in_logo & (np.abs(np.cos(az)) > 0.2) & inside & (np.abs(gu) <= 3.0)
    accent_rgb = np.array(colorsys.hsv_to_rgb(*spec.accent_hsv))
    rgb = np.where(in_logo[..., None], lam[..., None] * accent_rgb[None, None, :], rgb)

    rgb = np.clip(rgb, 0.0, 1.0) * inside[..., None]
    return rgb, inside


SUPERSAMPLE = 2


def _placement_box(center, scale, resolution):
    box = int(round(scale * resolution))
    ox = int(round(center[0] * resolution - box / 2.0))
    oy = int(round(center[1] * resolution - box / 2.0))
    if box < 2 or ox < 0 or oy < 0 or ox + box > resolution or oy + box > resolution:
        raise InvalidConfigError(
            f"placement box (offset=({ox},{oy}), side={box}) leaves the {resolution}px frame"
        )
    return ox, oy, box


def render_placed(spec: ProductSpec, center, scale, resolution: int, theta_deg=None):
    """Premultiplied RGB [0,1] and coverage alpha [0,1] at `resolution`,
    with the product box placed at (center, scale) in frame fractions."""
    spec.validate()
    theta = spec.view_angle_deg if theta_deg is None else theta_deg
    if abs(theta) > VIEW_ANGLE_LIMIT:
        raise InvalidConfigError(f"view angle {theta} outside +-{VIEW_ANGLE_LIMIT}")
    ox, oy, box = _placement_box(center, scale, resolution)
    n_hi = box * SUPERSAMPLE
    rgb_hi, alpha_hi = _body_fields(spec, theta, n_hi)
    prem = rgb_hi * alpha_hi[..., None]
    f = SUPERSAMPLE
    prem_ds = prem.reshape(box, f, box, f, 3).mean(axis=(1, 3))
    alpha_ds = alpha_hi.astype(np.float64).reshape(box, f, box, f).mean(axis=(1, 3))
    rgb = np.zeros((resolution, resolution, 3), dtype=np.float64)
    alpha = np.zeros((resolution, resolution), dtype=np.float64)
    rgb[oy : oy + box, ox : ox + box] = prem_ds
    alpha[oy : oy + box, ox : ox + box] = alpha_ds
    return rgb, alpha


def render_product(spec: ProductSpec, resolution: int):
    """Centered reference render: (uint8 RGB image, uint8 0/255 mask).

    The image is premultiplied against a black background; the mask marks
    every pixel with nonzero coverage."""
    rgb, alpha = render_placed(spec, (0.5, 0.5), spec.size_fraction, resolution)
    img = np.clip(rgb * 255.0, 0.0, 255.0).round().astype(np.uint8)
    mask = ((alpha > 0.0) * 255).astype(np.uint8)
    return img, mask


# ---------------------------------------------------------------------------
# scenes


def _hash01(ix, iy, salt: int):
    h = (ix.astype(np.uint32) * np.uint32(73856093)
         ^ iy.astype(np.uint32) * np.uint32(19349663)
         ^ np.uint32(salt * 83492791))
    h = (h ^ (h >> np.uint32(13))) * np.uint32(1274126177)
    return ((h >> np.uint32(8)) & np.uint32(0xFFFF)).astype(np.float64) / 65535.0


def _background(scene: SceneSpec, resolution: int) -> np.ndarray:
    n = resolution
    yy = (np.arange(n, dtype=np.float64) + 0.5) / n
    xx = (np.arange(n, dtype=np.float64) + 0.5) / n
    gy = yy[:, None].repeat(n, axis=1)
    gx = xx[None, :].repeat(n, axis=0)
    iy, ix = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    bg = scene.background
    if bg == "studio":
        base = 0.92 - 0.18 * gy
        rgb = np.stack([base, base, base * 1.01], axis=-1)
    elif bg == "sunset":
        r = 0.95 - 0.35 * gx
        g = 0.55 - 0.25 * gy
        b = 0.45 + 0.25 * gx - 0.15 * gy
        rgb = np.stack([r, g, b], axis=-1)
    elif bg == "forest":
        tex = 0.08 * (_hash01(ix, iy, 7) - 0.5)
        g = 0.55 - 0.25 * gy + tex
        rgb = np.stack([0.20 + 0.5 * tex, g, 0.22 + 0.4 * tex], axis=-1)
    else:  # night
        base = 0.10 + 0.08 * (1.0 - gy)
        rgb = np.stack([base * 0.7, base * 0.8, base * 1.6], axis=-1)
        stars = _hash01(ix, iy, 3) > 0.995
        rgb = np.where(stars[..., None] & (gy < FLOOR_Y)[..., None], 0.95, rgb)

    # surface band below the floor line
    floor = gy >= FLOOR_Y
    depth = np.clip((gy - FLOOR_Y) / max(1.0 - FLOOR_Y, 1e-6), 0.0, 1.0)
    surf = scene.surface
    if surf == "matte":
        band = np.stack([0.42 - 0.1 * depth] * 3, axis=-1)
    elif surf == "gloss":
        shade = 0.55 - 0.18 * depth
        band = np.stack([shade * 0.96, shade * 0.98, shade * 1.08], axis=-1)
    else:  # wood
        stripes = 0.5 + 0.16 * np.sin(gx * 40.0 + 2.0 * _hash01(ix // 9, iy // 9, 11))
        band = np.stack([0.55 * stripes + 0.18, 0.36 * stripes + 0.10, 0.20 * stripes + 0.05], axis=-1)
    rgb = np.where(floor[..., None], band, rgb)
    tint = np.array(LIGHT_TINTS[scene.lighting])
    return np.clip(rgb * tint[None, None, :], 0.0, 1.0)


def apply_lighting(rgb_premul: np.ndarray, lighting: str, ox: int, box: int,
                   resolution: int) -> np.ndarray:
    """Scene lighting transform applied to a placed premultiplied render:
    a global tint plus a horizontal luminance ramp across the placement box."""
    tint = np.array(LIGHT_TINTS[lighting])
    out = rgb_premul * tint[None, None, :]
    ramp_sign = LIGHT_RAMP[lighting]
    if ramp_sign:
        x = np.arange(resolution, dtype=np.float64)
        xn = np.clip((x - ox) / max(box, 1), 0.0, 1.0)
        factor = 1.0 + ramp_sign * LIGHT_RAMP_STRENGTH * (xn - 0.5) * 2.0
        out = out * factor[None, :, None]
    return np.clip(out, 0.0, 1.0)


def compose_target(spec: ProductSpec, scene: SceneSpec, resolution: int) -> np.ndarray:
    """Target ad image: background + surface + shadow + lit product (+ gloss
    reflection). uint8 (H,W,3)."""
    scene.validate()
    ox, oy, box = _placement_box(scene.center, scene.scale, resolution)
    bg = _background(scene, resolution)

    prem, alpha = render_placed(spec, scene.center, scene.scale, resolution)
    lit = apply_lighting(prem, scene.lighting, ox, box, resolution)

    # soft contact shadow on the background
    y_bottom = oy + box
    yy, xx = np.meshgrid(np.arange(resolution), np.arange(resolution), indexing="ij")
    ex = (xx - (ox + box / 2.0)) / max(0.46 * box, 1e-6)
    ey = (yy - y_bottom) / max(0.12 * box, 1e-6)
    shadow = np.clip(1.0 - (ex ** 2 + ey ** 2), 0.0, 1.0)
    bg = bg * (1.0 - 0.35 * shadow[..., None])

    out = bg * (1.0 - alpha[..., None]) + lit

    if scene.surface == "gloss":
        refl_h = min(box // 2, resolution - y_bottom)
        for dy in range(refl_h):
            src = y_bottom - 1 - dy
            dst = y_bottom + dy
            if src < 0:
                break
            fade = 0.30 * (1.0 - dy / max(refl_h, 1))
            a = alpha[src][:, None] * fade
            out[dst] = out[dst] * (1.0 - a) + lit[src] * a
    return np.clip(out * 255.0, 0.0, 255.0).round().astype(np.uint8)


# ---------------------------------------------------------------------------
# sampling and dataset assembly


def item_rng(seed: int, *key) -> np.random.Generator:
    """Independent per-item stream: any subset of items is reproducible."""
    return np.random.default_rng(np.random.SeedSequence((seed,) + tuple(int(k) for k in key)))


def sample_product_spec(rng: np.random.Generator) -> ProductSpec:
    h = rng.uniform(0.0, 1.0)
    spec = ProductSpec(
        category=CATEGORIES[rng.integers(len(CATEGORIES))],
        body_hsv=(h, rng.uniform(0.45, 0.9), rng.uniform(0.5, 0.95)),
        accent_hsv=((h + rng.uniform(0.25, 0.75)) % 1.0, rng.uniform(0.7, 1.0), rng.uniform(0.75, 1.0)),
        glyph=GLYPHS[rng.integers(len(GLYPHS))],
        logo_u=rng.uniform(-0.3, 0.3),
        logo_v=rng.uniform(-0.45, 0.25),
        size_fraction=rng.uniform(*SIZE_RANGE),
        view_angle_deg=rng.uniform(-35.0, 35.0),
    )
    spec.validate()
    return spec


def sample_scene_spec(rng: np.random.Generator, scale: float) -> SceneSpec:
    half = scale / 2.0
    cx = rng.uniform(half + 0.02, 1.0 - half - 0.02)
    cy = FLOOR_Y - half + rng.uniform(-0.04, 0.0)
    cy = min(max(cy, half + 0.01), 1.0 - half - 0.01)
    scene = SceneSpec(
        background=BACKGROUNDS[rng.integers(len(BACKGROUNDS))],
        lighting=LIGHTINGS[rng.integers(len(LIGHTINGS))],
        surface=SURFACES[rng.integers(len(SURFACES))],
        center=(float(cx), float(cy)),
        scale=float(scale),
    )
    scene.validate()
    return scene


def record_paths(rid: str) -> tuple:
    return (os.path.join("images", f"{rid}_product.ppm"),
            os.path.join("images", f"{rid}_mask.pgm"),
            os.path.join("images", f"{rid}_target.ppm"))


def write_triplet_images(out_dir: str, rid: str, spec: ProductSpec, scene: SceneSpec,
                         resolution: int, theta_deg=None):
    """Render and write product/mask/target files; returns relative paths."""
    prod_rel, mask_rel, targ_rel = record_paths(rid)
    prem, alpha = render_placed(spec, scene.center, scene.scale, resolution, theta_deg=theta_deg)
    img = np.clip(prem * 255.0, 0.0, 255.0).round().astype(np.uint8)
    mask = ((alpha > 0.0) * 255).astype(np.uint8)
    write_ppm(os.path.join(out_dir, prod_rel), img)
    write_pgm(os.path.join(out_dir, mask_rel), mask)
    target = compose_target(spec, scene, resolution)
    write_ppm(os.path.join(out_dir, targ_rel), target)
    return prod_rel, mask_rel, targ_rel


def save_manifest(records: list, path: str):
    try:
        with open(path, "w", encoding="utf-8") as f:
            for r in records:
                f.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    except OSError as e:
        raise DataIOError(f"cannot write manifest {path}: {e}") from e


def load_manifest(path: str) -> list:
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    records.append(TripletRecord(**json.loads(line)))
    except OSError as e:
        raise DataIOError(f"cannot read manifest {path}: {e}") from e
    return records


def save_specs(entries: dict, path: str):
    try:
        with open(path, "w", encoding="utf-8") as f:
            for rid in entries:
                spec, scene = entries[rid]
                f.write(json.dumps({"id": rid, "product": asdict(spec), "scene": asdict(scene)},
                                   sort_keys=True) + "\n")
    except OSError as e:
        raise DataIOError(f"cannot write specs {path}: {e}") from e


def load_specs(path: str) -> dict:
    out = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                row = json.loads(line)
                prod = row["product"]
                prod["body_hsv"] = tuple(prod["body_hsv"])
                prod["accent_hsv"] = tuple(prod["accent_hsv"])
                scene = row["scene"]
                scene["center"] = tuple(scene["center"])
                out[row["id"]] = (ProductSpec(**prod), SceneSpec(**scene))
    except OSError as e:
        raise DataIOError(f"cannot read specs {path}: {e}") from e
    return out


MANIFEST_NAME = "manifest.jsonl"
SPECS_NAME = "specs.jsonl"
META_NAME = "meta.json"


def build_dataset(n: int, seed: int, out_dir: str, resolution: int = 32) -> list:
    """n base triplets under out_dir; returns the record list.

    Per-item seeds derive from (seed, index), so any subset regenerates
    identically regardless of order."""
    if n < 1:
        raise InvalidConfigError(f"dataset size must be >= 1, got {n}")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    records, specs = [], {}
    for idx in range(n):
        rng = item_rng(seed, idx)
        spec = sample_product_spec(rng)
        scene = sample_scene_spec(rng, spec.size_fraction)
        rid = f"t{idx:06d}"
        prod_rel, mask_rel, targ_rel = write_triplet_images(out_dir, rid, spec, scene, resolution)
        records.append(TripletRecord(
            id=rid, category=spec.category, scene_tokens=scene.tokens(),
            product_path=prod_rel, mask_path=mask_rel, target_path=targ_rel,
        ))
        specs[rid] = (spec, scene)
    save_manifest(records, os.path.join(out_dir, MANIFEST_NAME))
    save_specs(specs, os.path.join(out_dir, SPECS_NAME))
    meta = {"seed": int(seed), "n": int(n), "resolution": int(resolution), "version": 1}
    with open(os.path.join(out_dir, META_NAME), "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True)
    return records
