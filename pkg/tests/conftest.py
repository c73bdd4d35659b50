import numpy as np
import pytest
from hypothesis import settings

from drnnvo.dataset import SyntheticSceneConfig, generate_synthetic_sequence
from drnnvo.geometry import UnitQuaternion, quat_exp

settings.register_profile("default", max_examples=100, deadline=None)
settings.load_profile("default")


def qz(deg):
    return quat_exp([0.0, 0.0, np.radians(deg)])


def random_quats(n, seed=0):
    rng = np.random.default_rng(seed)
    return [UnitQuaternion(*rng.normal(size=4)) for _ in range(n)]


@pytest.fixture(scope="session")
def noiseless_seq():
    cfg = SyntheticSceneConfig(n_frames=20, n_points=150, yaw_wave_deg=1.5,
                               yaw_wave_period=15, pitch_wave_deg=0.2, seed=11)
    return generate_synthetic_sequence(cfg)


@pytest.fixture(scope="session")
def noisy_seq():
    cfg = SyntheticSceneConfig(n_frames=12, n_points=200, pixel_noise_sigma=0.5,
                               mismatch_rate=0.3, yaw_wave_deg=1.0, yaw_wave_period=10,
                               seed=5)
    return generate_synthetic_sequence(cfg)


def textured_image(h=376, w=1241, seed=0):
    from scipy import ndimage
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.uniform(0, 255, (h, w)), 2.0)
    img = (img - img.min()) / (img.max() - img.min()) * 255
    return img.astype(np.uint8)


def make_kitti(root, seq_id, poses, images, intrinsics=None):
    """Write a minimal KITTI odometry layout under ``root``."""
    from pathlib import Path

    from PIL import Image

    from drnnvo.dataset import KITTI_00_INTRINSICS, write_calib, write_poses

    root = Path(root)
    seq_dir = root / "sequences" / seq_id
    (seq_dir / "image_0").mkdir(parents=True, exist_ok=True)
    (root / "poses").mkdir(parents=True, exist_ok=True)
    write_calib(seq_dir / "calib.txt", intrinsics or KITTI_00_INTRINSICS)
    write_poses(root / "poses" / f"{seq_id}.txt", poses)
    for i, img in enumerate(images):
        Image.fromarray(img).save(seq_dir / "image_0" / f"{i:06d}.png")
    return root
