"""Marked spatial point clouds: variable-size point sets with spectral marks.

A point is (x, y, t, m) with integer pixel coordinates ``x`` (row) and
``y`` (column), a real-valued depth position ``t`` in bins, and per-band
log-intensities ``m`` (intensity ``r = exp(m)``).  Points carry stable
integer ids; a per-pixel index supports the local queries the samplers
need.
"""

from __future__ import annotations

import numpy as np


class PointCloud:
    """Growable set of marked 3-D points with a per-pixel index."""

    def __init__(self, n_bands: int):
        self.n_bands = int(n_bands)
        self._x = np.empty(0, dtype=np.int64)
        self._y = np.empty(0, dtype=np.int64)
        self._t = np.empty(0, dtype=float)
        self._m = np.empty((0, self.n_bands), dtype=float)
        self._alive = np.empty(0, dtype=bool)
        self._free: list[int] = []
        self.pixel_index: dict[tuple[int, int], list[int]] = {}

    # -- construction ----------------------------------------------------

    @classmethod
    def from_arrays(cls, x, y, t, m) -> "PointCloud":
        m = np.atleast_2d(np.asarray(m, dtype=float))
        cloud = cls(m.shape[1])
        for xi, yi, ti, mi in zip(x, y, t, m):
            cloud.add(int(xi), int(yi), float(ti), mi)
        return cloud

    def copy(self) -> "PointCloud":
        out = PointCloud(self.n_bands)
        out._x = self._x.copy()
        out._y = self._y.copy()
        out._t = self._t.copy()
        out._m = self._m.copy()
        out._alive = self._alive.copy()
        out._free = list(self._free)
        out.pixel_index = {k: list(v) for k, v in self.pixel_index.items()}
        return out

    # -- accessors --------------------------------------------------------

    @property
    def n_points(self) -> int:
        return int(self._alive.sum())

    def ids(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self._alive)]

    def x(self, n: int) -> int:
        return int(self._x[n])

    def y(self, n: int) -> int:
        return int(self._y[n])

    def t(self, n: int) -> float:
        return float(self._t[n])

    def m(self, n: int) -> np.ndarray:
        return self._m[n]

    def r(self, n: int) -> np.ndarray:
        return np.exp(self._m[n])

    def points_in_pixel(self, x: int, y: int) -> list[int]:
        return self.pixel_index.get((x, y), [])

    def arrays(self):
        """(x, y, t, m) arrays over live points, ordered by id."""
        idx = np.flatnonzero(self._alive)
        return self._x[idx], self._y[idx], self._t[idx], self._m[idx]

    # -- mutation ---------------------------------------------------------

    def add(self, x: int, y: int, t: float, m) -> int:
        m = np.asarray(m, dtype=float)
        if m.shape != (self.n_bands,):
            raise ValueError(f"marks must have shape ({self.n_bands},)")
        if self._free:
            n = self._free.pop()
            self._x[n], self._y[n], self._t[n] = x, y, t
            self._m[n] = m
            self._alive[n] = True
        else:
            n = self._x.size
            self._x = np.append(self._x, x)
            self._y = np.append(self._y, y)
            self._t = np.append(self._t, t)
            self._m = np.vstack([self._m, m[None, :]])
            self._alive = np.append(self._alive, True)
        self.pixel_index.setdefault((int(x), int(y)), []).append(n)
        return n

    def remove(self, n: int) -> None:
        if not self._alive[n]:
            raise KeyError(f"point {n} is not alive")
        self._alive[n] = False
        key = (int(self._x[n]), int(self._y[n]))
        self.pixel_index[key].remove(n)
        if not self.pixel_index[key]:
            del self.pixel_index[key]
        self._free.append(n)

    def set_t(self, n: int, t: float) -> None:
        self._t[n] = t

    def set_m(self, n: int, band: int, value: float) -> None:
        self._m[n, band] = value

    # -- queries ----------------------------------------------------------

    def strauss_valid(self, d_min: float, *, skip: int | None = None) -> bool:
        """1 iff no same-pixel pair is closer than ``d_min`` bins (strict)."""
        for ids in self.pixel_index.values():
            ids = [n for n in ids if n != skip]
            for a in range(len(ids)):
                for b in range(a + 1, len(ids)):
                    if abs(self._t[ids[a]] - self._t[ids[b]]) < d_min:
                        return False
        return True

    def hardcore_ok(self, x: int, y: int, t: float, d_min: float, *, exclude=()) -> bool:
        """Would a point at (x, y, t) respect the hard-core constraint?"""
        for n in self.points_in_pixel(x, y):
            if n in exclude:
                continue
            if abs(self._t[n] - t) < d_min:
                return False
        return True

    # -- export -----------------------------------------------------------

    def save_csv(self, path) -> None:
        """CSV ``x,y,t,m_1..m_L`` with 1-based pixel indices."""
        cols = ",".join(f"m_{l + 1}" for l in range(self.n_bands))
        with open(path, "w") as f:
            f.write(f"x,y,t,{cols}\n")
            for n in self.ids():
                marks = ",".join(f"{v:.10g}" for v in self._m[n])
                f.write(f"{self._x[n] + 1},{self._y[n] + 1},{self._t[n]:.10g},{marks}\n")

    @classmethod
    def load_csv(cls, path) -> "PointCloud":
        with open(path) as f:
            header = f.readline().strip().split(",")
            n_bands = len(header) - 3
            if n_bands < 1 or header[:3] != ["x", "y", "t"]:
                raise ValueError("point CSV must have columns x,y,t,m_1..m_L")
            cloud = cls(n_bands)
            for line in f:
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                cloud.add(int(parts[0]) - 1, int(parts[1]) - 1, float(parts[2]),
                          np.array([float(v) for v in parts[3:]]))
        return cloud

    def save_ply(self, path) -> None:
        """ASCII PLY with per-vertex spectral attributes (z holds the bin)."""
        ids = self.ids()
        with open(path, "w") as f:
            f.write("ply\nformat ascii 1.0\n")
            f.write(f"element vertex {len(ids)}\n")
            f.write("property float x\nproperty float y\nproperty float z\n")
            for l in range(self.n_bands):
                f.write(f"property float intensity_{l + 1}\n")
            f.write("end_header\n")
            for n in ids:
                vals = " ".join(f"{np.exp(v):.8g}" for v in self._m[n])
                f.write(f"{self._x[n] + 1} {self._y[n] + 1} {self._t[n]:.8g} {vals}\n")
