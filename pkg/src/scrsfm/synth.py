"""Synthetic scenes with exact ground truth.

A scene is one or more box-shaped rooms with axis-aligned furniture boxes.
Cameras follow a trajectory, every lattice cell (stride 8 px) is raycast
against the geometry, and its feature vector is a fixed smooth embedding of
the hit point plus per-view Gaussian noise.  This stands in for a camera and
a pretrained feature backbone.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidConfig, NoSurfaceHit
from .geometry import EPS_DEPTH, Intrinsics, RigidPose, axis_angle, look_at, project_points
from .refiners import default_focal
from .seeding import derive_rng

KINDS = ("room_orbit", "corridor", "two_component", "forward_facing")
MIN_HIT_FRACTION = 0.25
TWO_COMPONENT_OFFSET = np.array([40.0, 0.0, 0.0])


@dataclass(frozen=True)
class FeatureFieldConfig:
    dim: int = 32
    noise_sigma: float = 0.05
    stride: int = 8
    hidden: int = 64
    frequency: float = 1.5  # rad per scene unit for the sinusoidal part
    # a dominant affine part lets a regressor fit on one field map another one near-linearly,
    # which produces structured false inliers across components
    affine_gain: float = 0.5


@dataclass(frozen=True)
class SceneConfig:
    width: int = 640
    height: int = 480
    focal: float | None = None  # ground-truth focal; defaults to 70% of the diagonal
    field: FeatureFieldConfig = FeatureFieldConfig()

    def intrinsics(self) -> Intrinsics:
        f = self.focal if self.focal is not None else default_focal(self.width, self.height)
        return Intrinsics(f, self.width, self.height)


class FeatureField:
    """Smooth random map R^3 -> R^D: affine mixing plus a sinusoidal layer."""

    def __init__(self, dim, seed, origin=(0.0, 0.0, 0.0), hidden=64, frequency=1.5, affine_gain=0.5):
        rng = derive_rng(seed, "feature_field")
        self.origin = np.asarray(origin, dtype=np.float64)
        self.A = rng.normal(size=(dim, 3)) * affine_gain
        self.W1 = rng.normal(size=(hidden, 3)) * frequency
        self.b1 = rng.uniform(0.0, 2 * np.pi, size=hidden)
        self.W2 = rng.normal(size=(dim, hidden)) / np.sqrt(hidden)

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64) - self.origin
        return y @ self.A.T + np.sin(y @ self.W1.T + self.b1) @ self.W2.T


@dataclass
class Room:
    lo: np.ndarray
    hi: np.ndarray
    boxes: np.ndarray  # (k, 2, 3) lo/hi corners
    component: int = 0

    def primitives(self):
        lo = np.vstack([self.lo[None], self.boxes[:, 0]])
        hi = np.vstack([self.hi[None], self.boxes[:, 1]])
        return lo, hi


@dataclass
class ViewLattice:
    cells: np.ndarray  # (n,) flat lattice index of each hit cell
    pixels: np.ndarray  # (n, 2)
    features: np.ndarray  # (n, D)
    coords: np.ndarray  # (n, 3) ground-truth scene coordinates
    depth: np.ndarray  # (n,)


@dataclass
class SyntheticScene:
    kind: str
    seed: int
    config: SceneConfig
    rooms: list
    poses: np.ndarray  # (V, 3, 4) camera-to-scene
    components: np.ndarray  # (V,)
    views: list = field(default_factory=list)
    diameter: float = 0.0

    @property
    def n_views(self) -> int:
        return len(self.poses)

    @property
    def intrinsics(self) -> Intrinsics:
        return self.config.intrinsics()

    def pose(self, i) -> RigidPose:
        return RigidPose.from_matrix(self.poses[i])

    def fields(self):
        fc = self.config.field
        return [
            FeatureField(fc.dim, _field_seed(self.seed, c), 0.5 * (r.lo + r.hi), fc.hidden, fc.frequency, fc.affine_gain)
            for c, r in enumerate(self.rooms)
        ]


def _field_seed(seed, component):
    # every component gets an unrelated embedding
    return int(derive_rng(seed, "field_seed", component).integers(0, 2**62))


def lattice_pixels(width, height, stride=8):
    """Cell-centre pixel positions, row-major over the (H/stride, W/stride) lattice."""
    cols = np.arange(width // stride) * stride + stride / 2.0
    rows = np.arange(height // stride) * stride + stride / 2.0
    uu, vv = np.meshgrid(cols, rows)
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def raycast(origin, dirs, lo, hi):
    """Distance along each ray to the nearest box surface (inf if none).

    Boxes that contain the origin are hit from the inside (exit distance);
    all others from the outside (entry distance).  dirs: (N, 3); lo/hi: (M, 3).
    """
    origin = np.asarray(origin, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo[None] - origin) * inv[:, None]
        t2 = (hi[None] - origin) * inv[:, None]
    tmin = np.fmin(t1, t2).max(axis=2)
    tmax = np.fmax(t1, t2).min(axis=2)
    hit = (tmin <= tmax) & (tmax > EPS_DEPTH)
    t = np.where(tmin > EPS_DEPTH, tmin, tmax)
    t = np.where(hit, t, np.inf)
    return t.min(axis=1)


def render_view(rooms, T: RigidPose, K: Intrinsics, field_fn, fcfg: FeatureFieldConfig, rng) -> ViewLattice:
    pixels = lattice_pixels(K.width, K.height, fcfg.stride)
    rays = np.stack([(pixels[:, 0] - K.cx) / K.f, (pixels[:, 1] - K.cy) / K.f, np.ones(len(pixels))], axis=1)
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    dirs = rays @ T.R.T
    lo = np.vstack([r.primitives()[0] for r in rooms])
    hi = np.vstack([r.primitives()[1] for r in rooms])
    dist = raycast(T.t, dirs, lo, hi)
    noise = rng.normal(size=(len(pixels), fcfg.dim)) * fcfg.noise_sigma
    hit = np.isfinite(dist)
    if hit.mean() < MIN_HIT_FRACTION:
        raise NoSurfaceHit(f"only {hit.mean():.0%} of lattice cells hit a surface")
    cells = np.flatnonzero(hit)
    coords = T.t + dist[cells, None] * dirs[cells]
    depth = dist[cells] * rays[cells, 2]
    features = field_fn(coords) + noise[cells]
    return ViewLattice(cells, pixels[cells], features, coords, depth)


def _sample_boxes(rng, n, region_lo, region_hi, size_lo, size_hi, room_lo, room_hi, reject):
    boxes = []
    attempts = 0
    while len(boxes) < n and attempts < 10000:
        attempts += 1
        size = rng.uniform(size_lo, size_hi)
        c = rng.uniform(region_lo, region_hi)
        lo = np.maximum(c - size / 2, room_lo)
        hi = np.minimum(c + size / 2, room_hi)
        lo[2] = room_lo[2]  # boxes stand on the floor
        if np.any(hi - lo < 0.05) or reject(lo, hi):
            continue
        boxes.append(np.stack([lo, hi]))
    return np.array(boxes).reshape(-1, 2, 3)


def _rect_radial_range(lo, hi):
    """Min/max distance from the z axis over the xy rectangle [lo, hi]."""
    nx = np.clip(0.0, lo[0], hi[0])
    ny = np.clip(0.0, lo[1], hi[1])
    rmin = np.hypot(nx, ny)
    rmax = max(np.hypot(x, y) for x in (lo[0], hi[0]) for y in (lo[1], hi[1]))
    return rmin, rmax


ORBIT_RADIUS = 2.5
ORBIT_CLEARANCE = 0.45


def _orbit_room(rng, offset, component):
    lo = np.array([-4.0, -4.0, 0.0]) + offset
    hi = np.array([4.0, 4.0, 3.0]) + offset

    def reject(blo, bhi):
        rmin, rmax = _rect_radial_range(blo - offset, bhi - offset)
        return rmax > ORBIT_RADIUS - ORBIT_CLEARANCE and rmin < ORBIT_RADIUS + ORBIT_CLEARANCE

    n = int(rng.integers(5, 21))
    boxes = _sample_boxes(rng, n, lo + [0.3, 0.3, 0], hi - [0.3, 0.3, 0], [0.3, 0.3, 0.3], [1.2, 1.2, 2.0], lo, hi, reject)
    return Room(lo, hi, boxes, component)


def _orbit_poses(rng, n, offset):
    poses = []
    for i in range(n):
        a = 2 * np.pi * i / n + rng.uniform(-0.01, 0.01)
        eye = offset + [ORBIT_RADIUS * np.cos(a), ORBIT_RADIUS * np.sin(a), 1.5 + rng.uniform(-0.1, 0.1)]
        target = offset + [rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), 1.2]
        poses.append(look_at(eye, target).matrix34())
    return poses


def _build(kind, n_views, rng):
    if kind == "room_orbit":
        rooms = [_orbit_room(rng, np.zeros(3), 0)]
        poses = _orbit_poses(rng, n_views, np.zeros(3))
        comps = [0] * n_views
    elif kind == "two_component":
        if n_views < 2:
            raise InvalidConfig("two_component needs at least 2 views")
        n0 = (n_views + 1) // 2
        rooms = [_orbit_room(rng, np.zeros(3), 0), _orbit_room(rng, TWO_COMPONENT_OFFSET, 1)]
        poses = _orbit_poses(rng, n0, np.zeros(3)) + _orbit_poses(rng, n_views - n0, TWO_COMPONENT_OFFSET)
        comps = [0] * n0 + [1] * (n_views - n0)
    elif kind == "corridor":
        lo, hi = np.array([0.0, -1.5, 0.0]), np.array([30.0, 1.5, 3.0])
        n = int(rng.integers(5, 21))
        left = _sample_boxes(rng, (n + 1) // 2, [2.0, 1.0, 0], [29.0, 1.4, 0], [0.3, 0.3, 0.3], [1.0, 0.8, 2.0],
                             lo, hi, lambda a, b: a[1] < 0.5)
        right = _sample_boxes(rng, n // 2, [2.0, -1.4, 0], [29.0, -1.0, 0], [0.3, 0.3, 0.3], [1.0, 0.8, 2.0],
                              lo, hi, lambda a, b: b[1] > -0.5)
        rooms = [Room(lo, hi, np.concatenate([left, right]), 0)]
        poses = []
        for x in np.linspace(1.0, 21.0, n_views):
            eye = np.array([x, rng.uniform(-0.1, 0.1), 1.5 + rng.uniform(-0.05, 0.05)])
            yaw, pitch = np.radians(rng.uniform(-5, 5)), np.radians(rng.uniform(-3, 3))
            d = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
            poses.append(look_at(eye, eye + d).matrix34())
        comps = [0] * n_views
    elif kind == "forward_facing":
        lo, hi = np.array([-2.0, -3.0, 0.0]), np.array([6.0, 3.0, 3.0])
        n = int(rng.integers(5, 21))
        boxes = _sample_boxes(rng, n, [1.5, -2.7, 0], [5.5, 2.7, 0], [0.3, 0.3, 0.3], [1.2, 1.2, 2.0],
                              lo, hi, lambda a, b: a[0] < 1.0)
        rooms = [Room(lo, hi, boxes, 0)]
        base = look_at([0.0, 0.0, 1.5], [5.0, 0.0, 1.3])
        poses = []
        for _ in range(n_views):
            R = axis_angle(rng.normal(size=3), rng.uniform(0, 2.0)) @ base.R
            poses.append(RigidPose(R, base.t + rng.uniform(-0.05, 0.05, 3)).matrix34())
        comps = [0] * n_views
    else:
        raise InvalidConfig(f"unknown scene kind {kind!r}; expected one of {KINDS}")
    return rooms, np.array(poses), np.array(comps, dtype=np.int64)


def _diameter(rooms):
    lo = np.min([r.lo for r in rooms], axis=0)
    hi = np.max([r.hi for r in rooms], axis=0)
    return float(np.linalg.norm(hi - lo))


def view_noise_rng(seed, view_id):
    return derive_rng(seed, "view_noise", view_id)


def generate_scene(kind, n_views, cfg: SceneConfig = SceneConfig(), rng_seed=0) -> SyntheticScene:
    if not isinstance(n_views, (int, np.integer)) or n_views < 1:
        raise InvalidConfig(f"n_views must be a positive integer, got {n_views!r}")
    if kind not in KINDS:
        raise InvalidConfig(f"unknown scene kind {kind!r}; expected one of {KINDS}")
    if cfg.width % cfg.field.stride or cfg.height % cfg.field.stride:
        raise InvalidConfig("image size must be a multiple of the lattice stride")
    if cfg.field.noise_sigma < 0 or cfg.field.dim < 1:
        raise InvalidConfig("invalid feature field configuration")
    rng = derive_rng(rng_seed, "geometry", kind)
    rooms, poses, comps = _build(kind, int(n_views), rng)
    scene = SyntheticScene(kind, int(rng_seed), cfg, rooms, poses, comps, diameter=_diameter(rooms))
    fields = scene.fields()
    K = cfg.intrinsics()
    for i in range(scene.n_views):
        scene.views.append(
            render_view(rooms, scene.pose(i), K, fields[comps[i]], cfg.field, view_noise_rng(rng_seed, i))
        )
    return scene


# ---------------------------------------------------------------- validation


@dataclass
class ValidationReport:
    violations: list  # (view_id, check, detail)
    samples_checked: int
    views_checked: int

    @property
    def ok(self) -> bool:
        return not self.violations

    def counts(self) -> dict:
        out = {}
        for _, check, _ in self.violations:
            out[check] = out.get(check, 0) + 1
        return out

    def summary(self) -> str:
        if self.ok:
            return f"scene valid: {self.views_checked} views, {self.samples_checked} lattice samples"
        parts = ", ".join(f"{k}={v}" for k, v in sorted(self.counts().items()))
        return f"scene INVALID ({parts}); {self.views_checked} views, {self.samples_checked} samples"


def validate_scene(scene: SyntheticScene, projection_tol=1e-9, feature_tol=1e-9) -> ValidationReport:
    K = scene.intrinsics
    fields = scene.fields()
    fcfg = scene.config.field
    n_cells = (K.width // fcfg.stride) * (K.height // fcfg.stride)
    violations = []
    samples = 0
    for i, v in enumerate(scene.views):
        T = scene.pose(i)
        samples += len(v.cells)
        uv, z = project_points(K.f, K.cx, K.cy, T.R, T.t, v.coords)
        err = np.linalg.norm(uv - v.pixels, axis=1)
        if not np.all(err < projection_tol):
            worst = np.nanmax(np.where(np.isfinite(err), err, np.inf))
            violations.append((i, "projection", f"max reprojection error {worst:.3g} px"))
        if not np.all(v.depth > 0) or not np.allclose(z, v.depth, rtol=1e-9, atol=1e-9):
            violations.append((i, "depth", "non-positive or inconsistent depth"))
        noise = view_noise_rng(scene.seed, i).normal(size=(n_cells, fcfg.dim)) * fcfg.noise_sigma
        expected = fields[scene.components[i]](v.coords) + noise[v.cells]
        dev = np.abs(expected - v.features).max() if len(v.cells) else 0.0
        if not dev <= feature_tol:
            violations.append((i, "features", f"feature mismatch {dev:.3g}"))
        violations += [(i, "trajectory", msg) for msg in _trajectory_checks(scene, i)]
    if scene.kind == "two_component":
        boxes = []
        for c in (0, 1):
            pts = [v.coords for v, comp in zip(scene.views, scene.components) if comp == c]
            if pts:
                pts = np.concatenate(pts)
                boxes.append((pts.min(axis=0), pts.max(axis=0)))
        if len(boxes) == 2 and np.all(boxes[0][1] >= boxes[1][0]) and np.all(boxes[1][1] >= boxes[0][0]):
            violations.append((-1, "components", "component bounding boxes overlap"))
    return ValidationReport(violations, samples, scene.n_views)


def _trajectory_checks(scene, i):
    T = scene.pose(i)
    room = scene.rooms[scene.components[i]]
    msgs = []
    if np.any(T.t <= room.lo) or np.any(T.t >= room.hi):
        msgs.append("camera outside its room")
    if scene.kind in ("room_orbit", "two_component"):
        c = T.t - 0.5 * (room.lo + room.hi)
        if abs(np.hypot(c[0], c[1]) - ORBIT_RADIUS) > 1e-6:
            msgs.append("camera off the orbit circle")
        if np.dot(T.R[:, 2][:2], -c[:2]) <= 0:
            msgs.append("orbit camera not looking inward")
    elif scene.kind == "corridor":
        if abs(T.t[1]) > 0.1 + 1e-9 or T.R[0, 2] <= 0.9:
            msgs.append("corridor camera off the line or not looking forward")
    elif scene.kind == "forward_facing":
        if np.any(np.abs(T.t - [0.0, 0.0, 1.5]) > 0.05 + 1e-9) or T.R[0, 2] <= 0.9:
            msgs.append("forward-facing camera outside the jitter bounds")
    return msgs


# ---------------------------------------------------------------- file format

_MAGIC = b"SCRSCENE"
_VERSION = 1
_POSE_BYTES = 12 * 8


def _header(scene: SyntheticScene) -> dict:
    cfg = scene.config
    return {
        "kind": scene.kind,
        "seed": scene.seed,
        "n_views": scene.n_views,
        "width": cfg.width,
        "height": cfg.height,
        "focal_gt": cfg.intrinsics().f,
        "field": {
            "dim": cfg.field.dim,
            "noise_sigma": cfg.field.noise_sigma,
            "stride": cfg.field.stride,
            "hidden": cfg.field.hidden,
            "frequency": cfg.field.frequency,
            "affine_gain": cfg.field.affine_gain,
        },
        "diameter": scene.diameter,
        "rooms": [
            {"lo": r.lo.tolist(), "hi": r.hi.tolist(), "boxes": r.boxes.tolist(), "component": r.component}
            for r in scene.rooms
        ],
    }


def scene_bytes(scene: SyntheticScene) -> bytes:
    """Binary layout: magic, version, header length, JSON header, then one record per view:
    view id, component, cell count (u32 each), ground-truth pose (12 f8),
    cells (n i8), pixels (n x 2 f8), features (n x D f8), scene coordinates (n x 3 f8), depth (n f8)."""
    buf = io.BytesIO()
    header = json.dumps(_header(scene), sort_keys=True).encode()
    buf.write(_MAGIC + struct.pack("<II", _VERSION, len(header)) + header)
    for i, v in enumerate(scene.views):
        buf.write(struct.pack("<III", i, int(scene.components[i]), len(v.cells)))
        buf.write(np.ascontiguousarray(scene.poses[i], dtype="<f8").tobytes())
        for arr, dt in ((v.cells, "<i8"), (v.pixels, "<f8"), (v.features, "<f8"), (v.coords, "<f8"), (v.depth, "<f8")):
            buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def save_scene(scene: SyntheticScene, path):
    with open(path, "wb") as fh:
        fh.write(scene_bytes(scene))


def write_manifest(scene: SyntheticScene, path, scene_file=None):
    report = validate_scene(scene)
    data = {
        "format_version": _VERSION,
        "scene_file": str(scene_file) if scene_file is not None else None,
        "kind": scene.kind,
        "n_views": scene.n_views,
        "seed": scene.seed,
        "width": scene.config.width,
        "height": scene.config.height,
        "feature_dim": scene.config.field.dim,
        "noise_sigma": scene.config.field.noise_sigma,
        "diameter": scene.diameter,
        "validation": report.summary(),
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


def _read_header(fh):
    if fh.read(len(_MAGIC)) != _MAGIC:
        raise FormatError("not a scene file")
    version, hlen = struct.unpack("<II", fh.read(8))
    if version != _VERSION:
        raise FormatError(f"unsupported scene file version {version}")
    return json.loads(fh.read(hlen).decode())


def _read_array(fh, n, dt, shape):
    raw = fh.read(n * 8)
    if len(raw) != n * 8:
        raise FormatError("truncated scene file")
    return np.frombuffer(raw, dtype=dt).reshape(shape).astype(np.float64 if dt == "<f8" else np.int64)


def _config_from_header(h) -> SceneConfig:
    f = h["field"]
    return SceneConfig(
        h["width"], h["height"], h["focal_gt"],
        FeatureFieldConfig(f["dim"], f["noise_sigma"], f["stride"], f["hidden"], f["frequency"], f["affine_gain"]),
    )


def load_scene(path) -> SyntheticScene:
    """Full load including ground truth (evaluation and validation only)."""
    with open(path, "rb") as fh:
        h = _read_header(fh)
        cfg = _config_from_header(h)
        D = cfg.field.dim
        rooms = [Room(np.array(r["lo"]), np.array(r["hi"]), np.array(r["boxes"]).reshape(-1, 2, 3), r["component"])
                 for r in h["rooms"]]
        poses, comps, views = [], [], []
        for _ in range(h["n_views"]):
            _, comp, n = struct.unpack("<III", fh.read(12))
            poses.append(_read_array(fh, 12, "<f8", (3, 4)))
            comps.append(comp)
            cells = _read_array(fh, n, "<i8", (n,))
            pixels = _read_array(fh, 2 * n, "<f8", (n, 2))
            feats = _read_array(fh, D * n, "<f8", (n, D))
            coords = _read_array(fh, 3 * n, "<f8", (n, 3))
            depth = _read_array(fh, n, "<f8", (n,))
            views.append(ViewLattice(cells, pixels, feats, coords, depth))
    return SyntheticScene(h["kind"], h["seed"], cfg, rooms, np.array(poses), np.array(comps, dtype=np.int64),
                          views, h["diameter"])


@dataclass
class InputView:
    """What the reconstruction is allowed to see of one view."""

    view_id: int
    pixels: np.ndarray
    features: np.ndarray
    depth: np.ndarray | None = None  # stands in for a monocular depth estimate


@dataclass
class InputSet:
    width: int
    height: int
    feature_dim: int
    views: list


def load_inputs(path) -> InputSet:
    """GT-stripping loader: seeks over pose and scene-coordinate bytes without reading them."""
    with open(path, "rb") as fh:
        h = _read_header(fh)
        D = h["field"]["dim"]
        views = []
        for _ in range(h["n_views"]):
            vid, _, n = struct.unpack("<III", fh.read(12))
            fh.seek(_POSE_BYTES, io.SEEK_CUR)
            fh.seek(8 * n, io.SEEK_CUR)  # cells
            pixels = _read_array(fh, 2 * n, "<f8", (n, 2))
            feats = _read_array(fh, D * n, "<f8", (n, D))
            fh.seek(8 * 3 * n, io.SEEK_CUR)
            depth = _read_array(fh, n, "<f8", (n,))
            views.append(InputView(vid, pixels, feats, depth))
    return InputSet(h["width"], h["height"], D, views)


def inputs_from_scene(scene: SyntheticScene) -> InputSet:
    views = [InputView(i, v.pixels, v.features, v.depth) for i, v in enumerate(scene.views)]
    return InputSet(scene.config.width, scene.config.height, scene.config.field.dim, views)
