"""
Synthetic multi-view LiDAR pedestrian simulator.

Pedestrians are capsule skeletons whose proportions follow 10 shape coefficients.
They walk along straight lines through a ring of synchronized virtual LiDARs, and
every sensor ray-casts the posed capsules analytically. Each frame is stored as
single-view scans plus a full-surface sample used as the completion target.

"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from tqdm import tqdm

from .config import SensorConfig, SynthConfig
from .errors import InvalidInputError
from .formats import write_lpc
from .geometry import SeedLike, normalize_to_box_center
from .models import SHAPE_PARAM_COUNT, Aabb, PointCloud, ShapeParams

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "pcreid-dataset"
MANIFEST_VERSION = 1
SHAPE_RANGE = (-1.0, 1.0)
SHAPE_NAMES = (
    "stature",
    "leg_length",
    "arm_length",
    "torso_length",
    "shoulder_width",
    "hip_width",
    "torso_girth",
    "limb_girth",
    "head_size",
    "pelvis_girth",
)
NOISE_CLIP = 6.0

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Capsule:
    """Segment ``a``–``b`` swept by a sphere of ``radius``; ``a == b`` is a sphere."""

    name: str
    a: np.ndarray
    b: np.ndarray
    radius: float

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.b - self.a))

    @property
    def area(self) -> float:
        return 2 * math.pi * self.radius * self.length + 4 * math.pi * self.radius**2

    def bounds(self) -> Aabb:
        return Aabb(
            np.minimum(self.a, self.b) - self.radius,
            np.maximum(self.a, self.b) + self.radius,
        )

    def closest_axis_points(self, points: np.ndarray) -> np.ndarray:
        axis = self.b - self.a
        squared = float(axis @ axis)
        if squared == 0.0:
            return np.broadcast_to(self.a, points.shape)

        fraction = np.clip((points - self.a) @ axis / squared, 0.0, 1.0)
        return self.a + fraction[:, None] * axis

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Signed distance to the surface (negative inside)."""
        points = np.atleast_2d(points)
        offsets = points - self.closest_axis_points(points)
        return np.linalg.norm(offsets, axis=1) - self.radius

    def normals(self, points: np.ndarray) -> np.ndarray:
        offsets = points - self.closest_axis_points(points)
        return offsets / np.linalg.norm(offsets, axis=1, keepdims=True)

    def ray_distances(self, origin: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Distance along each unit ray to its first entry into the capsule (inf on miss)."""
        radius2 = self.radius**2
        hits = np.full(directions.shape[0], np.inf)
        axis = self.b - self.a
        axis2 = float(axis @ axis)
        if axis2 > 0.0:
            oa = origin - self.a
            ray_axis = directions @ axis
            origin_axis = float(oa @ axis)
            ray_oa = directions @ oa
            a = axis2 - ray_axis**2
            b = axis2 * ray_oa - origin_axis * ray_axis
            c = axis2 * float(oa @ oa) - origin_axis**2 - radius2 * axis2
            h = b**2 - a * c
            usable = (a > 1e-12) & (h >= 0)
            t = (-b - np.sqrt(np.maximum(h, 0.0))) / np.where(usable, a, 1.0)
            along = origin_axis + t * ray_axis
            usable &= (t > 0) & (along > 0) & (along < axis2)
            hits = np.where(usable, t, hits)

        for center in (self.a, self.b):
            oc = origin - center
            b = directions @ oc
            h = b**2 - (float(oc @ oc) - radius2)
            t = -b - np.sqrt(np.maximum(h, 0.0))
            hits = np.minimum(hits, np.where((h >= 0) & (t > 0), t, np.inf))

        return hits

    def sample_surface(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``count`` points uniformly on the capsule surface."""
        length = self.length
        axis = (self.b - self.a) / length if length > 0 else np.array([0.0, 0.0, 1.0])
        helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(axis, helper)
        u /= np.linalg.norm(u)
        v = np.cross(axis, u)

        lateral = 2 * math.pi * self.radius * length
        on_side = rng.random(count) * self.area < lateral
        height = rng.random(count) * length
        angle = rng.random(count) * 2 * math.pi
        side = (
            self.a
            + height[:, None] * axis
            + self.radius * (np.cos(angle)[:, None] * u + np.sin(angle)[:, None] * v)
        )

        direction = rng.normal(size=(count, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        ends = np.where((direction @ axis < 0)[:, None], self.a, self.b)
        caps = ends + self.radius * direction
        return np.where(on_side[:, None], side, caps)


@dataclass(frozen=True)
class BodyDimensions:
    stature_scale: float
    shin_length: float
    thigh_length: float
    torso_length: float
    neck_length: float
    upper_arm_length: float
    forearm_length: float
    hip_half_width: float
    shoulder_half_width: float
    pelvis_radius: float
    torso_radius: float
    head_radius: float
    thigh_radius: float
    shin_radius: float
    upper_arm_radius: float
    forearm_radius: float

    @property
    def hip_height(self) -> float:
        return self.shin_radius + self.shin_length + self.thigh_length

    @property
    def shoulder_height(self) -> float:
        return self.hip_height + self.torso_length


@dataclass(frozen=True)
class BodyModel:
    """
    Capsule body (pelvis, torso, head and two-segment limbs) driven by shape coefficients.

    Coefficient ``i`` scales the measurement named ``SHAPE_NAMES[i]``; every
    coefficient is meant to lie in ``SHAPE_RANGE``.

    """

    shape: ShapeParams

    def dimensions(self) -> BodyDimensions:
        beta = self.shape.values
        stature = 1 + 0.08 * beta[0]
        leg = 1 + 0.08 * beta[1]
        arm = 1 + 0.10 * beta[2]
        torso = 1 + 0.08 * beta[3]
        girth = 1 + 0.20 * beta[6]
        limb = 1 + 0.20 * beta[7]
        return BodyDimensions(
            stature_scale=stature,
            shin_length=0.43 * leg * stature,
            thigh_length=0.43 * leg * stature,
            torso_length=0.52 * torso * stature,
            neck_length=0.06 * stature,
            upper_arm_length=0.30 * arm * stature,
            forearm_length=0.27 * arm * stature,
            hip_half_width=0.09 * (1 + 0.15 * beta[5]) * stature,
            shoulder_half_width=0.19 * (1 + 0.15 * beta[4]) * stature,
            pelvis_radius=0.11 * (1 + 0.25 * beta[9]) * stature,
            torso_radius=0.13 * girth * stature,
            head_radius=0.10 * (1 + 0.15 * beta[8]) * stature,
            thigh_radius=0.075 * limb * stature,
            shin_radius=0.055 * limb * stature,
            upper_arm_radius=0.045 * limb * stature,
            forearm_radius=0.038 * limb * stature,
        )

    @property
    def height(self) -> float:
        """Standing height: the top of the rest-pose capsule set."""
        return max(
            float(c.bounds().max_corner[2]) for c in _body_capsules(self.dimensions(), {})
        )


@dataclass(frozen=True)
class GaitParams:
    frequency: float
    hip_amplitude: float
    knee_amplitude: float
    shoulder_amplitude: float
    elbow_amplitude: float
    phase: float
    speed: float

    def __post_init__(self) -> None:
        if self.frequency <= 0:
            raise InvalidInputError("stride frequency must be positive")

        if self.speed < 0:
            raise InvalidInputError("walking speed must be non-negative")


@dataclass
class PosedBody:
    capsules: list[Capsule]
    root: np.ndarray
    joint_angles: dict[str, float]

    def bounds(self) -> Aabb:
        boxes = [capsule.bounds() for capsule in self.capsules]
        return Aabb(
            np.min([box.min_corner for box in boxes], axis=0),
            np.max([box.max_corner for box in boxes], axis=0),
        )


@dataclass(frozen=True)
class Sensor:
    """A LiDAR at ``position`` looking horizontally along ``forward``."""

    position: np.ndarray
    forward: np.ndarray
    config: SensorConfig = field(default_factory=SensorConfig)

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        forward = self.forward / np.linalg.norm(self.forward)
        up = np.array([0.0, 0.0, 1.0])
        left = np.cross(up, forward)
        left /= np.linalg.norm(left)
        return forward, left, np.cross(forward, left)


def make_identity(seed: SeedLike) -> tuple[BodyModel, GaitParams]:
    """Draw a body shape uniformly in ``SHAPE_RANGE`` and an independent gait."""
    rng = np.random.default_rng(seed)
    shape = ShapeParams(rng.uniform(*SHAPE_RANGE, size=SHAPE_PARAM_COUNT))
    gait = GaitParams(
        frequency=float(rng.uniform(0.8, 1.1)),
        hip_amplitude=float(rng.uniform(0.30, 0.50)),
        knee_amplitude=float(rng.uniform(0.30, 0.70)),
        shoulder_amplitude=float(rng.uniform(0.15, 0.50)),
        elbow_amplitude=float(rng.uniform(0.10, 0.50)),
        phase=float(rng.uniform(0.0, 2 * math.pi)),
        speed=float(rng.uniform(1.0, 1.6)),
    )
    return BodyModel(shape), gait


def joint_angles(gait: GaitParams, t: float) -> dict[str, float]:
    """Sagittal joint angles (radians); legs in antiphase, each arm opposite its leg."""
    phi = 2 * math.pi * gait.frequency * t + gait.phase
    angles: dict[str, float] = {}
    for side, offset in (("left", 0.0), ("right", math.pi)):
        leg = phi + offset
        arm = leg + math.pi
        angles[f"{side}_hip"] = gait.hip_amplitude * math.sin(leg)
        angles[f"{side}_knee"] = gait.knee_amplitude * (1 + math.cos(leg)) / 2
        angles[f"{side}_shoulder"] = gait.shoulder_amplitude * math.sin(arm)
        angles[f"{side}_elbow"] = gait.elbow_amplitude * (1 + math.sin(arm)) / 2

    return angles


def _limb(
    name: str,
    joint: np.ndarray,
    angle: float,
    bend: float,
    lengths: tuple[float, float],
    radii: tuple[float, float],
) -> list[Capsule]:
    upper_dir = np.array([math.sin(angle), 0.0, -math.cos(angle)])
    lower_dir = np.array([math.sin(angle + bend), 0.0, -math.cos(angle + bend)])
    middle = joint + lengths[0] * upper_dir
    end = middle + lengths[1] * lower_dir
    return [
        Capsule(f"{name}_upper", joint, middle, radii[0]),
        Capsule(f"{name}_lower", middle, end, radii[1]),
    ]


def _body_capsules(dims: BodyDimensions, angles: dict[str, float]) -> list[Capsule]:
    s = dims.stature_scale
    hip_z = dims.hip_height
    shoulder_z = dims.shoulder_height
    head_z = shoulder_z + dims.neck_length + dims.head_radius
    capsules = [
        Capsule(
            "pelvis",
            np.array([0.0, -dims.hip_half_width, hip_z + 0.03 * s]),
            np.array([0.0, dims.hip_half_width, hip_z + 0.03 * s]),
            dims.pelvis_radius,
        ),
        Capsule(
            "torso",
            np.array([0.0, 0.0, hip_z + 0.05 * s]),
            np.array([0.0, 0.0, shoulder_z - 0.5 * dims.torso_radius]),
            dims.torso_radius,
        ),
        Capsule("head", np.array([0.0, 0.0, head_z]), np.array([0.0, 0.0, head_z]), dims.head_radius),
    ]
    for side, sign in (("left", 1.0), ("right", -1.0)):
        capsules += _limb(
            f"{side}_leg",
            np.array([0.0, sign * dims.hip_half_width, hip_z]),
            angles.get(f"{side}_hip", 0.0),
            -angles.get(f"{side}_knee", 0.0),
            (dims.thigh_length, dims.shin_length),
            (dims.thigh_radius, dims.shin_radius),
        )
        capsules += _limb(
            f"{side}_arm",
            np.array([0.0, sign * dims.shoulder_half_width, shoulder_z - 0.03 * s]),
            angles.get(f"{side}_shoulder", 0.0),
            angles.get(f"{side}_elbow", 0.0),
            (dims.upper_arm_length, dims.forearm_length),
            (dims.upper_arm_radius, dims.forearm_radius),
        )

    return capsules


def pose_at(
    body: BodyModel,
    gait: GaitParams,
    t: float,
    *,
    heading: float = 0.0,
    start: Sequence[float] = (0.0, 0.0),
) -> PosedBody:
    """
    Pose ``body`` at time ``t`` seconds of its walk.

    The root starts at ``start`` (ground plane) and advances along ``heading`` (radians
    from the x axis) at the walking speed.

    """
    if t < 0:
        raise InvalidInputError("time must be non-negative")

    angles = joint_angles(gait, t)
    direction = np.array([math.cos(heading), math.sin(heading), 0.0])
    root = np.array([start[0], start[1], 0.0]) + gait.speed * t * direction
    rotation = np.array(
        [
            [math.cos(heading), -math.sin(heading), 0.0],
            [math.sin(heading), math.cos(heading), 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    capsules = [
        Capsule(c.name, root + rotation @ c.a, root + rotation @ c.b, c.radius)
        for c in _body_capsules(body.dimensions(), angles)
    ]
    return PosedBody(capsules, root, angles)


def _angular_grid(fov_deg: float, resolution_deg: float) -> np.ndarray:
    steps = max(1, int(round(fov_deg / resolution_deg)))
    half = math.radians(fov_deg) / 2
    return -half + (np.arange(steps) + 0.5) * (2 * half / steps)


def _ray_window(capsules: Sequence[Capsule], sensor: Sensor) -> np.ndarray:
    """Unit directions of the sensor grid rays that can reach the capsules."""
    forward, left, up = sensor.axes()
    corners = []
    for capsule in capsules:
        box = capsule.bounds()
        for x in (box.min_corner[0], box.max_corner[0]):
            for y in (box.min_corner[1], box.max_corner[1]):
                for z in (box.min_corner[2], box.max_corner[2]):
                    corners.append((x, y, z))

    local = np.asarray(corners) - sensor.position
    fx, fy, fz = local @ forward, local @ left, local @ up
    azimuth = np.arctan2(fy, fx)
    elevation = np.arctan2(fz, np.hypot(fx, fy))

    config = sensor.config
    azimuths = _angular_grid(config.h_fov_deg, config.h_resolution_deg)
    elevations = _angular_grid(config.v_fov_deg, config.v_resolution_deg)
    azimuths = azimuths[(azimuths >= azimuth.min()) & (azimuths <= azimuth.max())]
    elevations = elevations[(elevations >= elevation.min()) & (elevations <= elevation.max())]

    stride = 1
    while math.ceil(len(azimuths) / stride) * math.ceil(len(elevations) / stride) > config.max_rays:
        stride += 1

    if stride > 1:
        logger.debug("Thinning the ray window by a factor of %d", stride)
        azimuths, elevations = azimuths[::stride], elevations[::stride]

    az, el = np.meshgrid(azimuths, elevations, indexing="xy")
    az, el = az.reshape(-1), el.reshape(-1)
    return (
        (np.cos(el) * np.cos(az))[:, None] * forward
        + (np.cos(el) * np.sin(az))[:, None] * left
        + np.sin(el)[:, None] * up
    )


def raycast_scan(
    capsules: Sequence[Capsule], sensor: Sensor, rng: SeedLike = None
) -> PointCloud:
    """
    Scan the capsules from ``sensor``.

    Each grid ray inside the field of view returns its nearest capsule entry point,
    perturbed along the ray by Gaussian range noise (clipped at 6 sigma). Rays that
    miss return nothing.

    """
    for capsule in capsules:
        if capsule.surface_distance(sensor.position)[0] <= 0:
            raise InvalidInputError(f"sensor is inside capsule {capsule.name!r}")

    rng = np.random.default_rng(rng)
    directions = _ray_window(capsules, sensor)
    if not len(directions):
        return PointCloud(np.empty((0, 3)))

    distances = np.stack(
        [capsule.ray_distances(sensor.position, directions) for capsule in capsules]
    ).min(axis=0)
    hit = np.isfinite(distances)
    sigma = sensor.config.range_noise
    noise = np.clip(rng.normal(0.0, sigma, size=int(hit.sum())), -NOISE_CLIP * sigma, NOISE_CLIP * sigma)
    ranges = distances[hit] + noise
    return PointCloud(sensor.position + ranges[:, None] * directions[hit])


def full_surface_sample(
    capsules: Sequence[Capsule], n: int = 512, rng: SeedLike = None
) -> PointCloud:
    """Sample ``n`` points on the capsule surfaces, capsules weighted by area."""
    if n < 1:
        raise InvalidInputError("sample size must be positive")

    rng = np.random.default_rng(rng)
    areas = np.array([capsule.area for capsule in capsules])
    owners = rng.choice(len(capsules), size=n, p=areas / areas.sum())
    points = np.empty((n, 3))
    for index, capsule in enumerate(capsules):
        selected = np.flatnonzero(owners == index)
        if len(selected):
            points[selected] = capsule.sample_surface(len(selected), rng)

    return PointCloud(points)


def sensor_rig(config: SensorConfig, views: int) -> list[Sensor]:
    """Place ``views`` sensors evenly on a circle around the origin, facing inwards."""
    if views < 1:
        raise InvalidInputError("at least one view is required")

    sensors = []
    for view in range(views):
        angle = 2 * math.pi * view / views
        position = np.array(
            [config.distance * math.cos(angle), config.distance * math.sin(angle), config.height]
        )
        forward = np.array([-math.cos(angle), -math.sin(angle), 0.0])
        sensors.append(Sensor(position, forward, config))

    return sensors


def _draw_identities(config: SynthConfig, seed: int) -> list[tuple[BodyModel, GaitParams]]:
    identities: list[tuple[BodyModel, GaitParams]] = []
    for index in range(config.identities):
        for attempt in range(10_000):
            body, gait = make_identity([seed, index, attempt])
            if all(
                np.linalg.norm(body.shape.values - other.shape.values)
                >= config.min_shape_separation
                for other, _ in identities
            ):
                break
        else:
            raise InvalidInputError(
                f"cannot place {config.identities} identities "
                f"{config.min_shape_separation} apart in shape space"
            )

        identities.append((body, gait))

    return identities


def _split_identities(config: SynthConfig, seed: int) -> list[str]:
    rng = np.random.default_rng([seed, 0x5EED])
    test_count = int(round(config.identities * config.test_fraction))
    test = set(rng.permutation(config.identities)[:test_count].tolist())
    return ["test" if index in test else "train" for index in range(config.identities)]


@dataclass
class _IdentityJob:
    index: int
    split: str
    body: BodyModel
    gait: GaitParams
    config: SynthConfig
    seed: int
    out_dir: Path


def _simulate_identity(job: _IdentityJob) -> list[dict[str, Any]]:
    config, gait = job.config, job.gait
    sensors = sensor_rig(config.sensor, config.views)
    rate = config.sensor.frame_rate
    duration = config.frames / rate
    margin = NOISE_CLIP * config.sensor.range_noise
    disjoint = config.disjoint_test_views and job.split == "test"
    records: list[dict[str, Any]] = []
    for sequence in range(config.sequences_per_view):
        rng = np.random.default_rng([job.seed, job.index, sequence, 1])
        heading = float(rng.uniform(0.0, 2 * math.pi))
        window = float(rng.uniform(0.0, 1.0 / gait.frequency))
        direction = np.array([math.cos(heading), math.sin(heading)])
        for view, sensor in enumerate(sensors):
            offset = window + (view * duration if disjoint else 0.0)
            start = -direction * gait.speed * (offset + duration / 2)
            prefix = f"id{job.index:04d}/s{sequence:02d}_v{view:02d}"
            truth_prefix = prefix if disjoint else f"id{job.index:04d}/s{sequence:02d}"
            frames = []
            for frame in range(config.frames):
                t = offset + frame / rate
                posed = pose_at(job.body, gait, t, heading=heading, start=start)
                box = posed.bounds().expanded(margin)
                scan_rng = np.random.default_rng([job.seed, job.index, sequence, view, frame, 2])
                scan = raycast_scan(posed.capsules, sensor, scan_rng)
                if not len(scan):
                    raise InvalidInputError(
                        f"view {view} sees no points of identity {job.index} at t={t:.2f}s"
                    )

                cloud_path = f"frames/{prefix}/f{frame:04d}.lpc"
                truth_path = f"truth/{truth_prefix}/f{frame:04d}.lpc"
                write_lpc(job.out_dir / cloud_path, normalize_to_box_center(scan, box))
                if disjoint or view == 0:
                    truth_rng = np.random.default_rng([job.seed, job.index, sequence, frame, 3])
                    truth = full_surface_sample(posed.capsules, config.truth_points, truth_rng)
                    write_lpc(job.out_dir / truth_path, normalize_to_box_center(truth, box))

                frames.append(
                    {
                        "time": round(t, 9),
                        "cloud": cloud_path,
                        "truth": truth_path,
                        "points": len(scan),
                        "center": [round(float(c), 9) for c in box.center],
                    }
                )

            records.append(
                {
                    "identity": job.index,
                    "sequence": sequence,
                    "view": view,
                    "split": job.split,
                    "heading": round(heading, 9),
                    "frames": frames,
                }
            )

    return records


def generate_dataset(config: SynthConfig, out_dir: Path | str, seed: int) -> dict[str, Any]:
    """
    Simulate ``config.identities`` pedestrians and write the dataset to ``out_dir``.

    :return: the manifest (also written to ``out_dir / MANIFEST_NAME``)

    """
    out_dir = Path(out_dir)
    sensor = config.sensor
    duration = config.frames / sensor.frame_rate
    walk = 1.6 * duration * (config.views if config.disjoint_test_views else 1)
    if walk / 2 + 1.0 >= sensor.distance:
        raise InvalidInputError(
            f"a {duration:.1f} s walk can reach the sensors at {sensor.distance} m; "
            "increase sensor.distance or reduce the frame count"
        )

    out_dir.mkdir(parents=True, exist_ok=True)
    identities = _draw_identities(config, seed)
    splits = _split_identities(config, seed)
    jobs = [
        _IdentityJob(index, splits[index], body, gait, config, seed, out_dir)
        for index, (body, gait) in enumerate(identities)
    ]
    logger.info(
        "Simulating %d identities from %d views into %s", len(jobs), config.views, out_dir
    )
    progress = tqdm(total=len(jobs), desc="identities", unit="id", disable=None)
    records: list[dict[str, Any]] = []
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as executor:
            for result in executor.map(_simulate_identity, jobs):
                records += result
                progress.update()
    else:
        for job in jobs:
            records += _simulate_identity(job)
            progress.update()

    progress.close()
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "seed": seed,
        "config": config.model_dump(mode="json"),
        "shape_names": list(SHAPE_NAMES),
        "identities": [
            {
                "identity": index,
                "split": splits[index],
                "condition": "synthetic",
                "height": round(body.height, 9),
                "shape": [float(value) for value in body.shape.values],
                "gait": asdict(gait),
            }
            for index, (body, gait) in enumerate(identities)
        ],
        "sequences": records,
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
