"""Pinhole projection of a 3D point cloud to a sparse 2D depth plane."""

import csv
from dataclasses import dataclass

import numpy as np

from .types import IngestionError


@dataclass
class LidarCloud:
    """Points (X, Y, Z) in meters, camera coordinates, plus pinhole intrinsics.

    ``intrinsics`` is (f_x, f_y, c_x, c_y) in pixels; focal lengths positive.
    """

    points: np.ndarray  # (N, 3)
    intrinsics: tuple[float, float, float, float]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        fx, fy = self.intrinsics[0], self.intrinsics[1]
        if fx <= 0 or fy <= 0:
            raise IngestionError(f"non-positive focal length in {self.intrinsics}")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_csv(cls, path, intrinsics) -> "LidarCloud":
        pts = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row:
                    continue
                try:
                    pts.append([float(v) for v in row[:3]])
                except ValueError:
                    continue  # header
        arr = np.array(pts, dtype=np.float64) if pts else np.zeros((0, 3))
        return cls(arr, tuple(intrinsics))


def project_lidar_to_image(cloud: LidarCloud, out_shape: tuple[int, int]) -> np.ndarray:
    """Render depth into an (H, W, 1) plane; nearest Z wins on pixel collisions.

    Points with Z <= 0 or projecting outside the image are discarded.  Pixel
    coordinates round half-up (floor(u + 0.5)); unhit pixels stay 0.
    """
    h, w = out_shape
    if h <= 0 or w <= 0:
        raise ValueError(f"non-positive output shape {out_shape}")
    fx, fy, cx, cy = cloud.intrinsics
    pts = cloud.points
    depth = np.full((h, w), np.inf, dtype=np.float64)
    if len(pts):
        z = pts[:, 2]
        front = z > 0
        x, y, z = pts[front, 0], pts[front, 1], z[front]
        u = np.floor(fx * x / z + cx + 0.5).astype(np.int64)
        v = np.floor(fy * y / z + cy + 0.5).astype(np.int64)
        inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
        np.minimum.at(depth, (v[inside], u[inside]), z[inside])
    plane = np.where(np.isinf(depth), 0.0, depth)
    return plane[:, :, None].astype(np.float32)
