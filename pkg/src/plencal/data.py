"""Observation records and metric scale constraints."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ScaleConstraint:
    """Known metric distance between two scene points."""

    point_a: int
    point_b: int
    distance: float
    weight: float = 1.0

    def __post_init__(self):
        if not self.distance > 0:
            raise ValueError("scale constraint distance must be positive")
        if self.point_a == self.point_b:
            raise ValueError("scale constraint needs two distinct points")


class ObservationSet:
    """Raw-image feature measurements ``(point, view, lens, x, y)``.

    Each record states that point ``point_id`` was seen in micro image
    ``lens_id`` of view ``view_id`` at distorted raw coordinates ``xy``.
    Records are kept sorted by (point, view, lens).
    """

    def __init__(self, point_ids, view_ids, lens_ids, xy, check=True):
        point_ids = np.asarray(point_ids, dtype=np.int64).reshape(-1)
        view_ids = np.asarray(view_ids, dtype=np.int64).reshape(-1)
        lens_ids = np.asarray(lens_ids, dtype=np.int64).reshape(-1)
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        if not (len(point_ids) == len(view_ids) == len(lens_ids) == len(xy)):
            raise ValueError("observation columns differ in length")
        order = np.lexsort((lens_ids, view_ids, point_ids))
        self.point_ids = point_ids[order]
        self.view_ids = view_ids[order]
        self.lens_ids = lens_ids[order]
        self.xy = xy[order]
        if check and len(self) > 1:
            key = np.stack([self.point_ids, self.view_ids, self.lens_ids], axis=1)
            if np.any(np.all(key[1:] == key[:-1], axis=1)):
                raise ValueError("duplicate (point, view, lens) observation")

    def __len__(self):
        return len(self.point_ids)

    @classmethod
    def from_records(cls, records):
        a = np.asarray(records, dtype=float).reshape(-1, 5)
        return cls(a[:, 0].astype(np.int64), a[:, 1].astype(np.int64), a[:, 2].astype(np.int64), a[:, 3:5])

    def records(self):
        return [
            [int(p), int(v), int(l), float(x), float(y)]
            for p, v, l, (x, y) in zip(self.point_ids, self.view_ids, self.lens_ids, self.xy)
        ]

    def subset(self, mask):
        mask = np.asarray(mask)
        return ObservationSet(self.point_ids[mask], self.view_ids[mask], self.lens_ids[mask], self.xy[mask],
                              check=False)

    def with_xy(self, xy):
        out = ObservationSet.__new__(ObservationSet)
        out.point_ids, out.view_ids, out.lens_ids = self.point_ids, self.view_ids, self.lens_ids
        out.xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        return out

    @property
    def num_points(self):
        return int(self.point_ids.max()) + 1 if len(self) else 0

    @property
    def num_views(self):
        return int(self.view_ids.max()) + 1 if len(self) else 0

    def pair_groups(self):
        """Group records by (point, view).

        Returns ``(pair_point, pair_view, starts, counts)`` where records
        ``starts[g]:starts[g] + counts[g]`` belong to pair ``g``.
        """
        if not len(self):
            e = np.zeros(0, dtype=np.int64)
            return e, e, e, e
        change = np.ones(len(self), dtype=bool)
        change[1:] = (self.point_ids[1:] != self.point_ids[:-1]) | (self.view_ids[1:] != self.view_ids[:-1])
        starts = np.flatnonzero(change)
        counts = np.diff(np.append(starts, len(self)))
        return self.point_ids[starts], self.view_ids[starts], starts, counts

    def pair_index(self):
        """Per-record index of its (point, view) group."""
        _, _, starts, counts = self.pair_groups()
        return np.repeat(np.arange(len(starts)), counts)

    def views_per_point(self):
        pp, _, _, _ = self.pair_groups()
        return np.bincount(pp, minlength=self.num_points)

    def filter_min_views(self, min_views=2):
        """Drop points seen in fewer than ``min_views`` views.

        Returns the filtered set and the list of dropped point ids.
        """
        vpp = self.views_per_point()
        bad = np.flatnonzero(vpp < min_views)
        if not len(bad):
            return self, []
        keep = ~np.isin(self.point_ids, bad)
        dropped = [int(b) for b in bad if vpp[b] > 0]
        return self.subset(keep), dropped
