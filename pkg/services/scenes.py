"""
Synthetic dynamic scenes under the monocular protocol.

Training views follow a smooth camera sweep with exactly one pose per
timestep. Test views sit at timesteps between training timesteps, seen
from a pose offset off the training trajectory.
"""

from dataclasses import dataclass

import numpy as np

from core.errors import ConfigError
from models.gaussians import GaussianCloud, logit
from models.scene import Camera, GeneratorKind, GroundTruth, SceneData, SceneSpec, ViewSample
from services.renderer import render_forward


@dataclass
class MotionPass:
    u: np.ndarray


class SceneMotion:
    """
    Analytic ground-truth motion of a generated cloud.

    Every rigid part moves as a unit; ``forward`` follows the deformation
    field interface so the renderer treats both alike.
    """

    def __init__(self, truth: GroundTruth):
        self.kind = truth.spec.kind
        self.amplitude = truth.spec.motion_amplitude
        self.labels = truth.part_labels

    def displacement(self, positions: np.ndarray, t: float) -> np.ndarray:
        u = np.zeros_like(positions)
        wave = np.sin(2.0 * np.pi * t)
        match self.kind:
            case GeneratorKind.RIGID_ORBIT:
                phi = self.amplitude * wave
                c, s = np.cos(phi), np.sin(phi)
                x, y = positions[:, 0], positions[:, 1]
                u[:, 0] = (c - 1.0) * x - s * y + 0.5 * self.amplitude * wave
                u[:, 1] = s * x + (c - 1.0) * y
            case GeneratorKind.ARTICULATED:
                u[:, 1] = np.where(self.labels == 1, self.amplitude * wave, 0.0)
            case GeneratorKind.BOUNCING:
                phases = self.labels / 3.0
                u[:, 1] = self.amplitude * np.abs(np.sin(2.0 * np.pi * (t + phases)))
        return u

    def forward(self, positions: np.ndarray, t: float) -> MotionPass:
        return MotionPass(u=self.displacement(positions, t))


def _sample_shape(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = spec.gaussian_count
    e = spec.extent
    match spec.kind:
        case GeneratorKind.RIGID_ORBIT:
            xy = rng.uniform([-0.7 * e, -0.4 * e], [0.7 * e, 0.4 * e], size=(n, 2))
            labels = np.zeros(n, dtype=np.int64)
        case GeneratorKind.ARTICULATED:
            labels = (np.arange(n) % 2).astype(np.int64)
            x = rng.uniform(0.05 * e, 0.8 * e, size=n)
            x = np.where(labels == 1, x, -x)
            y = rng.uniform(-0.3 * e, 0.3 * e, size=n)
            xy = np.stack([x, y], axis=1)
        case GeneratorKind.BOUNCING:
            labels = (np.arange(n) % 3).astype(np.int64)
            centers = np.array([[-0.6 * e, -0.3 * e], [0.0, -0.3 * e], [0.6 * e, -0.3 * e]])
            radius = 0.2 * e * np.sqrt(rng.uniform(0.0, 1.0, size=n))
            angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
            xy = centers[labels] + radius[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
        case _:
            raise ConfigError(f"Unknown generator kind {spec.kind!r}")
    if spec.dim == 3:
        z = rng.uniform(-0.3 * e, 0.3 * e, size=(n, 1))
        xy = np.concatenate([xy, z], axis=1)
    return xy, labels


def _ground_truth(spec: SceneSpec, rng: np.random.Generator) -> GroundTruth:
    positions, labels = _sample_shape(spec, rng)
    n = spec.gaussian_count
    cloud = GaussianCloud(
        positions=positions,
        log_scales=np.log(rng.uniform(0.03, 0.07, size=n) * spec.extent),
        opacity_logits=logit(rng.uniform(0.6, 0.95, size=n)),
        colors=rng.uniform(0.2, 1.0, size=n),
        depth_keys=np.arange(n, dtype=np.float64),
    )
    return GroundTruth(spec=spec, cloud=cloud, part_labels=labels)


def view_protocol(spec: SceneSpec) -> tuple[list[tuple[float, float]], list[tuple[float, float]]]:
    """(angle, t) pairs for train and test views."""
    n, m = spec.train_views, spec.test_views
    train_t = np.linspace(0.0, 1.0, n)
    train = [(spec.camera_arc * t, float(t)) for t in train_t]
    # one test timestep inside each of m evenly spread train intervals
    slots = np.floor((np.arange(m) + 0.5) * (n - 1) / m).astype(int)
    test_t = 0.5 * (train_t[slots] + train_t[slots + 1])
    test = [(spec.camera_arc * t + spec.test_pose_offset, float(t)) for t in test_t]
    return train, test


def render_truth(truth: GroundTruth, angle: float, t: float) -> np.ndarray:
    spec = truth.spec
    cam = Camera(angle=angle, width=spec.width, pixel_extent=spec.pixel_extent, background=spec.background)
    return render_forward(truth.cloud, SceneMotion(truth), cam, t)


def generate_scene(spec: SceneSpec) -> SceneData:
    """
    Generate a synthetic dynamic scene and its train/test views.

    Deterministic in ``spec.seed``.

    Raises:
        ConfigError: unknown generator kind
    """
    rng = np.random.default_rng(spec.seed)
    truth = _ground_truth(spec, rng)
    train_poses, test_poses = view_protocol(spec)
    train = [ViewSample(angle, t, render_truth(truth, angle, t)) for angle, t in train_poses]
    test = [ViewSample(angle, t, render_truth(truth, angle, t)) for angle, t in test_poses]
    return SceneData(spec=spec, train=train, test=test, truth=truth)
