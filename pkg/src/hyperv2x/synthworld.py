"""Procedural multi-agent BEV scenes with ray-cast occlusion.

World frame: x to the right, y along increasing row index, origin at the
centre of the square region. Grid cell ``(i, j)`` has its centre at
``(-L/2 + (j + 0.5) * s, -L/2 + (i + 0.5) * s)``.

The ego grid is the region grid itself. The ego pose is jittered by less than
half a cell around the origin so that rays never start on a grid corner.
Every other agent observes a grid of the same size centred on its own pose
and rotated by its yaw.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, ScenarioConfig, _build

MAX_PLACEMENT_ATTEMPTS = 100
DATASET_FORMAT = "hyperv2x.dataset/1"

# (length range, width range) in metres, indexed by dynamic class - 1
_CLASS_DIMS = (
    ((3.8, 4.8), (1.7, 2.0)),  # car
    ((5.5, 7.5), (2.2, 2.5)),  # truck / van
    ((2.0, 2.6), (1.0, 1.2)),  # small vehicle
)


class PlacementError(RuntimeError):
    """Raised when rejection sampling cannot place an object."""


class DatasetError(RuntimeError):
    """Corrupt dataset directory or checksum mismatch."""


@dataclass
class BEVScene:
    gt_semantic: np.ndarray  # (H, W) int64 class ids
    agent_poses: np.ndarray  # (V, 3) x, y, yaw; row 0 is the ego
    vehicles: np.ndarray  # (N, 6) cx, cy, length, width, yaw, class
    noise_std: float
    region_size_m: float
    cell_size_m: float

    @property
    def grid_size(self) -> int:
        return self.gt_semantic.shape[0]

    @property
    def num_agents(self) -> int:
        return self.agent_poses.shape[0]

    def observation_frames(self) -> np.ndarray:
        """(V, 3) frames (x, y, yaw) of each agent's local grid; the ego's is the identity."""
        frames = self.agent_poses.astype(np.float64).copy()
        frames[0] = 0.0
        return frames

    def equals(self, other: "BEVScene") -> bool:
        return (
            np.array_equal(self.gt_semantic, other.gt_semantic)
            and np.array_equal(self.agent_poses, other.agent_poses)
            and np.array_equal(self.vehicles, other.vehicles)
            and self.noise_std == other.noise_std
            and self.region_size_m == other.region_size_m
            and self.cell_size_m == other.cell_size_m
        )


@dataclass
class AgentObservation:
    grid: np.ndarray  # (C0, H, W): occupancy, visibility, noisy occupancy copies
    agent_index: int


def cell_centers(grid_size: int, cell_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Centre coordinates ``(x, y)`` of every cell, each of shape (H, W)."""
    half = grid_size * cell_size / 2.0
    c = -half + (np.arange(grid_size) + 0.5) * cell_size
    x, y = np.meshgrid(c, c)
    return x, y


def rect_corners(rect: np.ndarray, pad: float = 0.0) -> np.ndarray:
    cx, cy, length, width, yaw = rect[:5]
    hl, hw = length / 2 + pad, width / 2 + pad
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def _rects_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    # separating axis test on two convex quadrilaterals
    for poly in (a, b):
        for k in range(4):
            edge = poly[(k + 1) % 4] - poly[k]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _point_rect_distance(p: np.ndarray, rect: np.ndarray) -> float:
    cx, cy, length, width, yaw = rect[:5]
    d = p - np.array([cx, cy])
    c, s = math.cos(yaw), math.sin(yaw)
    u, v = d[0] * c + d[1] * s, -d[0] * s + d[1] * c
    du = max(abs(u) - length / 2, 0.0)
    dv = max(abs(v) - width / 2, 0.0)
    return math.hypot(du, dv)


def rasterize_vehicles(vehicles: np.ndarray, grid_size: int, cell_size: float) -> np.ndarray:
    """Class-id grid: a cell is foreground iff its centre lies inside a vehicle rectangle."""
    grid = np.zeros((grid_size, grid_size), dtype=np.int64)
    x, y = cell_centers(grid_size, cell_size)
    for veh in vehicles:
        cx, cy, length, width, yaw, cls = veh
        c, s = math.cos(yaw), math.sin(yaw)
        dx, dy = x - cx, y - cy
        u = dx * c + dy * s
        v = -dx * s + dy * c
        inside = (np.abs(u) <= length / 2) & (np.abs(v) <= width / 2)
        grid[inside] = int(cls)
    return grid


def rasterize_gt(scene: BEVScene) -> np.ndarray:
    return rasterize_vehicles(scene.vehicles, scene.grid_size, scene.cell_size_m)


def _scene_rng(config: ScenarioConfig, seed: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, seed, *extra])


def _place_agents(config: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    s = config.cell_size_m
    half = config.region_size_m / 2
    poses = [np.array([rng.uniform(-0.4, 0.4) * s, rng.uniform(-0.4, 0.4) * s, 0.0])]
    margin = min(2.0, half / 4)
    for _ in range(1, config.num_agents):
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            xy = rng.uniform(-half + margin, half - margin, size=2)
            yaw = rng.uniform(-math.pi, math.pi)
            if all(np.hypot(*(xy - p[:2])) >= config.agent_min_separation_m for p in poses):
                poses.append(np.array([xy[0], xy[1], yaw]))
                break
        else:
            raise PlacementError(
                f"could not place agent {len(poses)} after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
    return np.stack(poses)


def _place_vehicles(
    config: ScenarioConfig, rng: np.random.Generator, agents: np.ndarray
) -> np.ndarray:
    half = config.region_size_m / 2
    gap = max(1.5 * config.cell_size_m, 0.5)
    agent_clearance = 1.0 + config.cell_size_m
    lo, hi = config.vehicle_count_range
    count = int(rng.integers(lo, hi + 1))
    # per-scene class mix, so class frequencies differ between scenes
    big_fraction = rng.uniform(0.0, 0.6)
    placed: list[np.ndarray] = []
    padded: list[np.ndarray] = []
    for n in range(count):
        if config.num_classes_dynamic == 1:
            cls = 1
        elif rng.uniform() < big_fraction:
            cls = int(rng.integers(2, config.num_classes_dynamic + 1))
        else:
            cls = 1
        (l_lo, l_hi), (w_lo, w_hi) = _CLASS_DIMS[(cls - 1) % len(_CLASS_DIMS)]
        length, width = rng.uniform(l_lo, l_hi), rng.uniform(w_lo, w_hi)
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            yaw = rng.uniform(-math.pi, math.pi)
            cx, cy = rng.uniform(-half, half, size=2)
            rect = np.array([cx, cy, length, width, yaw, cls], dtype=np.float64)
            corners = rect_corners(rect)
            if np.abs(corners).max() > half:
                continue
            pad = rect_corners(rect, pad=gap / 2)
            if any(_rects_overlap(pad, other) for other in padded):
                continue
            if any(_point_rect_distance(a[:2], rect) < agent_clearance for a in agents):
                continue
            placed.append(rect)
            padded.append(pad)
            break
        else:
            raise PlacementError(
                f"could not place vehicle {n + 1}/{count} without overlap "
                f"after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
    if not placed:
        return np.zeros((0, 6))
    return np.stack(placed)


def generate_scene(config: ScenarioConfig, seed: int) -> BEVScene:
    """Deterministic scene for ``(config, seed)``."""
    config.validate()
    rng = _scene_rng(config, seed)
    agents = _place_agents(config, rng)
    vehicles = _place_vehicles(config, rng, agents)
    if config.obs_noise_std_max is None:
        noise_std = float(config.obs_noise_std)
    else:
        noise_std = float(rng.uniform(config.obs_noise_std, config.obs_noise_std_max))
    gt = rasterize_vehicles(vehicles, config.grid_size, config.cell_size_m)
    return BEVScene(
        gt_semantic=gt,
        agent_poses=agents,
        vehicles=vehicles,
        noise_std=noise_std,
        region_size_m=float(config.region_size_m),
        cell_size_m=float(config.cell_size_m),
    )


def cast_visibility(
    occupied: np.ndarray,
    pose: np.ndarray,
    cell_size: float,
    fov_deg: float,
    range_m: float,
) -> np.ndarray:
    """Boolean (H, W) mask of cells visible from ``pose`` on the region grid.

    A cell is visible when its centre is within range and field of view and the
    segment from the sensor to that centre is not blocked. An occupied cell on
    the way blocks the ray only once the ray has passed its centre (projection
    of the cell centre onto the segment lies before the target). The sensor's
    own cell never occludes. Traversal is an amanatides-woo DDA run in lockstep
    for every target.
    """
    h, w = occupied.shape
    half = w * cell_size / 2.0
    ox = (pose[0] + half) / cell_size
    oy = (pose[1] + half) / cell_size
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dx = (jj + 0.5 - ox).ravel()
    dy = (ii + 0.5 - oy).ravel()
    dist = np.hypot(dx, dy) * cell_size
    cand = dist <= range_m
    if fov_deg < 360.0:
        bearing = np.arctan2(dy, dx) - pose[2]
        bearing = (bearing + np.pi) % (2 * np.pi) - np.pi
        cand &= np.abs(bearing) <= math.radians(fov_deg) / 2
    visible = np.zeros(h * w, dtype=bool)
    idx = np.flatnonzero(cand)
    if idx.size == 0:
        return visible.reshape(h, w)

    dx, dy = dx[idx], dy[idx]
    tx, ty = jj.ravel()[idx], ii.ravel()[idx]
    c0x, c0y = int(math.floor(ox)), int(math.floor(oy))
    cx = np.full(idx.size, c0x)
    cy = np.full(idx.size, c0y)
    with np.errstate(divide="ignore", invalid="ignore"):
        step_x = np.sign(dx).astype(np.int64)
        step_y = np.sign(dy).astype(np.int64)
        delta_x = np.where(dx != 0, 1.0 / np.abs(dx), np.inf)
        delta_y = np.where(dy != 0, 1.0 / np.abs(dy), np.inf)
        tmax_x = np.where(dx > 0, (c0x + 1 - ox) / dx, np.where(dx < 0, (ox - c0x) / -dx, np.inf))
        tmax_y = np.where(dy > 0, (c0y + 1 - oy) / dy, np.where(dy < 0, (oy - c0y) / -dy, np.inf))
    denom = np.maximum(dx * dx + dy * dy, 1e-300)
    active = np.ones(idx.size, dtype=bool)
    hit = np.zeros(idx.size, dtype=bool)
    for _ in range(h + w + 4):
        at_target = active & (cx == tx) & (cy == ty)
        hit |= at_target
        active &= ~at_target
        inb = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        active &= inb
        if not active.any():
            break
        occ = occupied[np.clip(cy, 0, h - 1), np.clip(cx, 0, w - 1)]
        own = (cx == c0x) & (cy == c0y)
        proj = ((cx + 0.5 - ox) * dx + (cy + 0.5 - oy) * dy) / denom
        active &= ~(occ & ~own & (proj < 1.0))
        go_x = active & (tmax_x <= tmax_y)
        go_y = active & (tmax_y <= tmax_x)
        cx = np.where(go_x, cx + step_x, cx)
        tmax_x = np.where(go_x, tmax_x + delta_x, tmax_x)
        cy = np.where(go_y, cy + step_y, cy)
        tmax_y = np.where(go_y, tmax_y + delta_y, tmax_y)
    visible[idx] = hit
    return visible.reshape(h, w)


def visibility_mask(scene: BEVScene, agent_index: int, config: ScenarioConfig) -> np.ndarray:
    """Region-grid visibility of one agent."""
    return cast_visibility(
        scene.gt_semantic > 0,
        scene.agent_poses[agent_index],
        scene.cell_size_m,
        config.agent_fov_deg,
        config.agent_range_m,
    )


def local_to_world(frame: np.ndarray, grid_size: int, cell_size: float) -> tuple[np.ndarray, np.ndarray]:
    """World coordinates of every local-grid cell centre for a grid frame (x, y, yaw)."""
    lx, ly = cell_centers(grid_size, cell_size)
    c, s = math.cos(frame[2]), math.sin(frame[2])
    return c * lx - s * ly + frame[0], s * lx + c * ly + frame[1]


def render_observation(
    scene: BEVScene, agent_index: int, config: ScenarioConfig, seed: int
) -> AgentObservation:
    """Noisy occupancy and visibility of one agent, expressed in its local grid."""
    if not 0 <= agent_index < scene.num_agents:
        raise IndexError(f"agent_index {agent_index} out of range for {scene.num_agents} agents")
    n = scene.grid_size
    s = scene.cell_size_m
    vis_world = visibility_mask(scene, agent_index, config)
    fg_world = scene.gt_semantic > 0
    wx, wy = local_to_world(scene.observation_frames()[agent_index], n, s)
    half = n * s / 2
    j = np.floor((wx + half) / s).astype(np.int64)
    i = np.floor((wy + half) / s).astype(np.int64)
    inside = (i >= 0) & (i < n) & (j >= 0) & (j < n)
    ic, jc = np.clip(i, 0, n - 1), np.clip(j, 0, n - 1)
    vis = vis_world[ic, jc] & inside
    fg = fg_world[ic, jc].astype(np.float64)

    rng = _scene_rng(config, seed, agent_index, 7)
    grid = np.zeros((config.obs_channels, n, n), dtype=np.float32)
    for ch in [0, *range(2, config.obs_channels)]:
        noise = rng.normal(0.0, scene.noise_std, size=(n, n)) if scene.noise_std > 0 else 0.0
        grid[ch] = np.where(vis, np.clip(fg + noise, 0.0, 1.0), 0.0)
    grid[1] = vis
    return AgentObservation(grid=grid, agent_index=agent_index)


def render_all(scene: BEVScene, config: ScenarioConfig, seed: int) -> np.ndarray:
    """(V, C0, H, W) stack of every agent's observation."""
    return np.stack(
        [render_observation(scene, a, config, seed).grid for a in range(scene.num_agents)]
    )


# ---------------------------------------------------------------------------
# datasets on disk


@dataclass
class SceneDataset:
    config: ScenarioConfig
    seed: int
    scenes: list[BEVScene] = field(default_factory=list)
    observations: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.scenes)


def scene_seed(base_seed: int, index: int) -> int:
    return base_seed * 1_000_003 + index


def generate_dataset(config: ScenarioConfig, n_scenes: int, seed: int) -> SceneDataset:
    ds = SceneDataset(config=config, seed=seed)
    for k in range(n_scenes):
        sseed = scene_seed(seed, k)
        scene = generate_scene(config, sseed)
        ds.scenes.append(scene)
        ds.observations.append(render_all(scene, config, sseed))
    return ds


def _scene_arrays(scene: BEVScene, obs: np.ndarray) -> dict[str, np.ndarray]:
    return {
        "gt_semantic": scene.gt_semantic.astype(np.int64),
        "agent_poses": scene.agent_poses.astype(np.float64),
        "vehicles": scene.vehicles.astype(np.float64).reshape(-1, 6),
        "noise_std": np.array(scene.noise_std, dtype=np.float64),
        "geometry": np.array([scene.region_size_m, scene.cell_size_m], dtype=np.float64),
        "observations": obs.astype(np.float32),
    }


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def persist_dataset(ds: SceneDataset, path: str | Path) -> dict:
    """Write one ``.npz`` per scene plus ``manifest.json``; returns the manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (scene, obs) in enumerate(zip(ds.scenes, ds.observations)):
        name = f"scene_{k:05d}.npz"
        target = path / name
        fd, tmp = tempfile.mkstemp(dir=path, suffix=".npz.tmp")
        os.close(fd)
        with open(tmp, "wb") as fh:
            np.savez(fh, **_scene_arrays(scene, obs))
        os.replace(tmp, target)
        entries.append({"file": name, "sha256": _sha256(target)})
    manifest = {
        "format": DATASET_FORMAT,
        "config": asdict(ds.config),
        "seed": ds.seed,
        "num_scenes": len(entries),
        "scenes": entries,
    }
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    os.replace(tmp, path / "manifest.json")
    return manifest


def load_dataset(path: str | Path) -> SceneDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"{path}: missing manifest.json") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: corrupt manifest.json ({exc})") from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{path}: unsupported dataset format {manifest.get('format')!r}")
    try:
        config = _build(ScenarioConfig, manifest["config"], "scenario")
    except (ConfigError, KeyError) as exc:
        raise DatasetError(f"{path}: invalid config in manifest ({exc})") from exc
    ds = SceneDataset(config=config, seed=int(manifest["seed"]))
    if manifest.get("num_scenes") != len(manifest["scenes"]):
        raise DatasetError(f"{path}: num_scenes does not match the scene list")
    for entry in manifest["scenes"]:
        file = path / entry["file"]
        if not file.exists():
            raise DatasetError(f"{file}: missing scene file")
        if _sha256(file) != entry["sha256"]:
            raise DatasetError(f"{file}: checksum mismatch")
        try:
            with np.load(file, allow_pickle=False) as z:
                arrays = {k: z[k] for k in z.files}
        except Exception as exc:  # zipfile / format errors
            raise DatasetError(f"{file}: unreadable scene file ({exc})") from exc
        region, cell = arrays["geometry"].tolist()
        ds.scenes.append(
            BEVScene(
                gt_semantic=arrays["gt_semantic"],
                agent_poses=arrays["agent_poses"],
                vehicles=arrays["vehicles"],
                noise_std=float(arrays["noise_std"]),
                region_size_m=region,
                cell_size_m=cell,
            )
        )
        ds.observations.append(arrays["observations"])
    return ds
