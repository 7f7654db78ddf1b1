"""Event-stream handling: accumulate polarities over a time window into a 2D plane."""

import csv
from dataclasses import dataclass

import numpy as np

from .types import IngestionError


@dataclass
class EventStream:
    """Sparse camera events: columns x, y, t (microseconds), polarity in {-1, +1}.

    Events must be sorted by non-decreasing timestamp and lie inside
    ``sensor_shape`` (H, W).
    """

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    polarity: np.ndarray
    sensor_shape: tuple[int, int]

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        self.polarity = np.asarray(self.polarity, dtype=np.int64).reshape(-1)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.polarity) == n):
            raise IngestionError("event columns disagree on length")
        h, w = self.sensor_shape
        if n:
            if self.x.min() < 0 or self.x.max() >= w or self.y.min() < 0 or self.y.max() >= h:
                raise IngestionError("event coordinates outside sensor shape")
            if np.any(np.diff(self.t) < 0):
                raise IngestionError("event timestamps must be non-decreasing")
            if not np.isin(self.polarity, (-1, 1)).all():
                raise IngestionError("polarity must be -1 or +1")

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def from_csv(cls, path, sensor_shape: tuple[int, int]) -> "EventStream":
        """Read (x, y, t, polarity) rows; a header line is skipped if present."""
        xs, ys, ts, ps = [], [], [], []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row:
                    continue
                try:
                    vals = [int(float(v)) for v in row[:4]]
                except ValueError:
                    continue  # header
                xs.append(vals[0])
                ys.append(vals[1])
                ts.append(vals[2])
                ps.append(vals[3])
        return cls(np.array(xs), np.array(ys), np.array(ts), np.array(ps), sensor_shape)


def integrate_events(
    stream: EventStream, t_start: int, t_end: int, normalize: bool = True
) -> np.ndarray:
    """Signed polarity count per pixel over [t_start, t_end), as an (H, W, 1) plane.

    With ``normalize`` the plane is scaled by its max absolute value into
    [-1, 1]; an all-zero accumulation stays zero.  The raw (unnormalized) count
    image is additive over disjoint time windows.
    """
    if not t_start < t_end:
        raise ValueError(f"empty or inverted window [{t_start}, {t_end})")
    h, w = stream.sensor_shape
    plane = np.zeros((h, w), dtype=np.float64)
    sel = (stream.t >= t_start) & (stream.t < t_end)
    np.add.at(plane, (stream.y[sel], stream.x[sel]), stream.polarity[sel].astype(np.float64))
    if normalize:
        peak = np.abs(plane).max()
        if peak > 0:
            plane = plane / peak
    return plane[:, :, None].astype(np.float32)
