"""Sparse photon-count cubes, sampling masks and instrument impulse responses.

Conventions
-----------
* In memory, pixel rows ``i``, columns ``j`` and bands ``l`` are 0-based
  (numpy style).  Histogram bins ``t`` are 1-based and run over ``[1, T]``,
  mirroring the usual time-correlated single-photon counting convention.
* All file formats (binary container and CSV) use 1-based indices for
  ``i``, ``j``, ``l`` and ``t``; the conversion happens at the I/O boundary.

Binary cube container (little endian)::

    magic    4s      b"MSLC"
    version  u32     1
    n_rows, n_cols, n_bands, n_bins   4 x u32
    flags    u32     bit 0: mask present
    [mask]   n_rows*n_cols*n_bands x u8, C order (i, j, l)
    n_events u64
    events   n_events records of (i u16, j u16, l u16, t u32, count u32),
             sorted by (i, j, l, t); indices 1-based

Photon histograms at low photon counts are overwhelmingly empty, so the
cube stores only non-zero bins per (pixel, band).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

_MAGIC = b"MSLC"
_VERSION = 1
_EVENT_DTYPE = np.dtype([("i", "<u2"), ("j", "<u2"), ("l", "<u2"), ("t", "<u4"), ("c", "<u4")])


class CubeError(ValueError):
    """Malformed cube data or inconsistent dimensions."""


@dataclass(frozen=True)
class CubeDims:
    """Dimensions of a photon-count hypercube (rows, cols, bands, bins)."""

    n_rows: int
    n_cols: int
    n_bands: int
    n_bins: int

    def __post_init__(self):
        for name in ("n_rows", "n_cols", "n_bands", "n_bins"):
            if int(getattr(self, name)) <= 0:
                raise CubeError(f"{name} must be strictly positive")

    @property
    def n_pixels(self) -> int:
        return self.n_rows * self.n_cols


class SamplingMask:
    """Binary cube declaring which (pixel, band) histograms were acquired.

    Attributes:
        bits: (n_rows, n_cols, n_bands) uint8 array with entries in {0, 1}.
        bands_per_pixel: number of sampled bands per pixel when the mask is
            regular (every pixel samples the same count), else None.
    """

    def __init__(self, bits: np.ndarray):
        bits = np.asarray(bits)
        if bits.ndim != 3:
            raise CubeError("mask bits must have shape (n_rows, n_cols, n_bands)")
        if not np.isin(bits, (0, 1)).all():
            raise CubeError("mask bits must be 0 or 1")
        self.bits = bits.astype(np.uint8)
        counts = self.bits.sum(axis=2)
        self.bands_per_pixel = int(counts.flat[0]) if (counts == counts.flat[0]).all() else None

    @property
    def shape(self):
        return self.bits.shape

    @classmethod
    def full(cls, n_rows: int, n_cols: int, n_bands: int) -> "SamplingMask":
        return cls(np.ones((n_rows, n_cols, n_bands), dtype=np.uint8))

    def __eq__(self, other):
        return isinstance(other, SamplingMask) and np.array_equal(self.bits, other.bits)


class ImpulseResponse:
    """Per-band discrete instrument response with compact support.

    Band ``l`` is a nonnegative waveform ``h_l`` sampled at integer offsets
    ``offset_start[l] .. offset_start[l] + len(values[l]) - 1`` relative to
    the surface position, and zero outside.  Off-grid evaluation uses
    linear interpolation so real-valued depth positions are well defined.
    """

    def __init__(self, offsets: list[int], values: list[np.ndarray]):
        if len(offsets) != len(values) or not values:
            raise CubeError("need one (offset, values) pair per band")
        self.offset_start = [int(o) for o in offsets]
        self.values = []
        for v in values:
            v = np.asarray(v, dtype=float)
            if v.ndim != 1 or v.size == 0:
                raise CubeError("impulse response values must be non-empty 1-D arrays")
            if (v < 0).any():
                raise CubeError("impulse response values must be nonnegative")
            if v.sum() <= 0:
                raise CubeError("impulse response must have positive total mass")
            self.values.append(v)
        self.n_bands = len(values)
        self.support_len = [v.size for v in self.values]
        self.max_support_len = max(self.support_len)
        self.band_sums = np.array([v.sum() for v in self.values])

    def eval(self, band: int, dt) -> np.ndarray:
        """h_band evaluated at real offsets ``dt`` by linear interpolation."""
        o = self.offset_start[band]
        v = self.values[band]
        grid = np.arange(o, o + v.size)
        return np.interp(np.asarray(dt, dtype=float), grid, v, left=0.0, right=0.0)

    def truncated_sum(self, band: int, t_pos: float, n_bins: int) -> float:
        """Sum of h_band(t - t_pos) over integer bins t in [1, n_bins].

        Equals ``band_sums[band]`` whenever the shifted support lies inside
        the histogram (linear interpolation preserves the discrete sum).
        """
        o = self.offset_start[band]
        lo = max(1, int(np.ceil(t_pos + o - 1)))
        hi = min(n_bins, int(np.floor(t_pos + o + self.values[band].size)))
        if lo > hi:
            return 0.0
        ts = np.arange(lo, hi + 1, dtype=float)
        return float(self.eval(band, ts - t_pos).sum())

    def support_interval(self, band: int, t_pos: float) -> tuple[float, float]:
        """Real interval outside which h_band(t - t_pos) vanishes."""
        o = self.offset_start[band]
        return t_pos + o, t_pos + o + self.values[band].size - 1


class LidarCube:
    """Sparse 4-D photon-count histogram.

    Events are stored per (pixel, band) as parallel arrays of 1-based bins
    and positive counts, sorted by bin.  Instances are immutable after
    construction and safe to share between readers.
    """

    def __init__(self, dims: CubeDims, events: dict[tuple[int, int, int], tuple[np.ndarray, np.ndarray]]):
        self.dims = dims
        self.events = {}
        for (i, j, l), (bins, counts) in events.items():
            bins = np.asarray(bins, dtype=np.int64)
            counts = np.asarray(counts, dtype=np.int64)
            if bins.size == 0:
                continue
            if not (0 <= i < dims.n_rows and 0 <= j < dims.n_cols and 0 <= l < dims.n_bands):
                raise CubeError(f"event pixel/band ({i},{j},{l}) outside dims")
            if bins.min() < 1 or bins.max() > dims.n_bins:
                raise CubeError(f"event bin outside [1, {dims.n_bins}] at ({i},{j},{l})")
            if (counts <= 0).any():
                raise CubeError("event counts must be positive")
            order = np.argsort(bins, kind="stable")
            bins, counts = bins[order], counts[order]
            if np.unique(bins).size != bins.size:
                # merge duplicate bins
                ub, inv = np.unique(bins, return_inverse=True)
                counts = np.bincount(inv, weights=counts).astype(np.int64)
                bins = ub
            self.events[(int(i), int(j), int(l))] = (bins, counts)

    @classmethod
    def from_records(cls, dims: CubeDims, i, j, l, t, c) -> "LidarCube":
        """Build from parallel 0-based pixel/band and 1-based bin arrays."""
        i, j, l = (np.asarray(a, dtype=np.int64) for a in (i, j, l))
        t, c = np.asarray(t, dtype=np.int64), np.asarray(c, dtype=np.int64)
        events: dict = {}
        if i.size:
            key = (i * dims.n_cols + j) * dims.n_bands + l
            order = np.argsort(key, kind="stable")
            key, t, c = key[order], t[order], c[order]
            starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
            bounds = np.r_[starts, key.size]
            for a, b in zip(bounds[:-1], bounds[1:]):
                k = int(key[a])
                li = k % dims.n_bands
                ji = (k // dims.n_bands) % dims.n_cols
                ii = k // (dims.n_bands * dims.n_cols)
                events[(ii, ji, li)] = (t[a:b], c[a:b])
        return cls(dims, events)

    def get(self, i: int, j: int, l: int) -> tuple[np.ndarray, np.ndarray]:
        """(bins, counts) arrays for one pixel-band; empty arrays if none."""
        return self.events.get((i, j, l), (np.empty(0, np.int64), np.empty(0, np.int64)))

    def total_photons(self) -> int:
        return int(sum(c.sum() for _, c in self.events.values()))

    def band_totals(self) -> np.ndarray:
        out = np.zeros(self.dims.n_bands, dtype=np.int64)
        for (_, _, l), (_, c) in self.events.items():
            out[l] += c.sum()
        return out

    def pixel_totals(self) -> np.ndarray:
        out = np.zeros((self.dims.n_rows, self.dims.n_cols), dtype=np.int64)
        for (i, j, _), (_, c) in self.events.items():
            out[i, j] += c.sum()
        return out

    def to_records(self):
        """Sorted (i, j, l, t, c) arrays, 0-based pixels/bands, 1-based bins."""
        rows = []
        for (i, j, l) in sorted(self.events):
            bins, counts = self.events[(i, j, l)]
            for t, c in zip(bins, counts):
                rows.append((i, j, l, int(t), int(c)))
        if not rows:
            return tuple(np.empty(0, np.int64) for _ in range(5))
        arr = np.array(rows, dtype=np.int64)
        return tuple(arr[:, k] for k in range(5))

    def dense(self) -> np.ndarray:
        """Dense (n_rows, n_cols, n_bands, n_bins) array; small cubes only."""
        d = self.dims
        z = np.zeros((d.n_rows, d.n_cols, d.n_bands, d.n_bins), dtype=np.int64)
        for (i, j, l), (bins, counts) in self.events.items():
            z[i, j, l, bins - 1] = counts
        return z

    @classmethod
    def from_dense(cls, z: np.ndarray) -> "LidarCube":
        z = np.asarray(z)
        dims = CubeDims(*z.shape)
        i, j, l, t = np.nonzero(z)
        return cls.from_records(dims, i, j, l, t + 1, z[i, j, l, t])

    def validate_against_mask(self, mask: SamplingMask) -> None:
        """Raise if any masked-out (pixel, band) carries photons."""
        if mask.shape != (self.dims.n_rows, self.dims.n_cols, self.dims.n_bands):
            raise CubeError("mask shape does not match cube dims")
        for (i, j, l) in self.events:
            if mask.bits[i, j, l] == 0:
                raise CubeError(f"photons recorded at masked-out pixel-band ({i},{j},{l})")


def bin_pixels(cube: LidarCube, mask: SamplingMask, n_bin: int) -> tuple[LidarCube, SamplingMask]:
    """Integrate photon detections in patches of ``n_bin`` x ``n_bin`` pixels.

    The coarse count at (I, J, l, t) is the sum over the patch; the coarse
    mask bit is 1 iff any fine bit in the patch is 1.  Total photon count
    is preserved for every ``n_bin``.
    """
    if n_bin < 1:
        raise CubeError("n_bin must be >= 1")
    if n_bin == 1:
        return cube, mask
    d = cube.dims
    nr = -(-d.n_rows // n_bin)
    nc = -(-d.n_cols // n_bin)
    new_dims = CubeDims(nr, nc, d.n_bands, d.n_bins)
    i, j, l, t, c = cube.to_records()
    coarse = LidarCube.from_records(new_dims, i // n_bin, j // n_bin, l, t, c)
    bits = np.zeros((nr, nc, d.n_bands), dtype=np.uint8)
    for I in range(nr):
        for J in range(nc):
            patch = mask.bits[I * n_bin:(I + 1) * n_bin, J * n_bin:(J + 1) * n_bin, :]
            bits[I, J, :] = patch.max(axis=(0, 1))
    return coarse, SamplingMask(bits)


def integrate_wavelengths(cube: LidarCube) -> LidarCube:
    """Accumulate photons across bands into a single-band cube."""
    d = cube.dims
    i, j, l, t, c = cube.to_records()
    new_dims = CubeDims(d.n_rows, d.n_cols, 1, d.n_bins)
    return LidarCube.from_records(new_dims, i, np.asarray(j), np.zeros_like(np.asarray(l)), t, c)


def store_cube(cube: LidarCube, path, mask: SamplingMask | None = None) -> None:
    """Write the binary container; events are stored in canonical order."""
    d = cube.dims
    i, j, l, t, c = cube.to_records()
    rec = np.empty(i.size, dtype=_EVENT_DTYPE)
    rec["i"], rec["j"], rec["l"] = i + 1, j + 1, l + 1
    rec["t"], rec["c"] = t, c
    flags = 1 if mask is not None else 0
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<6I", _VERSION, d.n_rows, d.n_cols, d.n_bands, d.n_bins, flags))
        if mask is not None:
            if mask.shape != (d.n_rows, d.n_cols, d.n_bands):
                raise CubeError("mask shape does not match cube dims")
            f.write(mask.bits.tobytes(order="C"))
        f.write(struct.pack("<Q", rec.size))
        f.write(rec.tobytes())


def load_cube(path) -> tuple[LidarCube, SamplingMask | None]:
    """Read the binary container written by :func:`store_cube`."""
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise CubeError("bad magic; not a cube container")
        header = f.read(24)
        if len(header) != 24:
            raise CubeError("truncated header")
        version, nr, nc, nb, nt, flags = struct.unpack("<6I", header)
        if version != _VERSION:
            raise CubeError(f"unsupported container version {version}")
        dims = CubeDims(nr, nc, nb, nt)
        mask = None
        if flags & 1:
            raw = f.read(nr * nc * nb)
            if len(raw) != nr * nc * nb:
                raise CubeError("truncated mask block")
            mask = SamplingMask(np.frombuffer(raw, dtype=np.uint8).reshape(nr, nc, nb))
        (n_events,) = struct.unpack("<Q", f.read(8))
        rec = np.frombuffer(f.read(n_events * _EVENT_DTYPE.itemsize), dtype=_EVENT_DTYPE)
        if rec.size != n_events:
            raise CubeError("truncated event block")
    if rec.size and (rec["i"].min() < 1 or rec["j"].min() < 1 or rec["l"].min() < 1):
        raise CubeError("event indices must be 1-based")
    cube = LidarCube.from_records(
        dims,
        rec["i"].astype(np.int64) - 1,
        rec["j"].astype(np.int64) - 1,
        rec["l"].astype(np.int64) - 1,
        rec["t"].astype(np.int64),
        rec["c"].astype(np.int64),
    )
    if mask is not None:
        cube.validate_against_mask(mask)
    return cube, mask


def save_events_csv(cube: LidarCube, path) -> None:
    """CSV export ``i,j,l,t,count`` with 1-based indices."""
    i, j, l, t, c = cube.to_records()
    with open(path, "w") as f:
        f.write("i,j,l,t,count\n")
        for row in zip(i + 1, j + 1, l + 1, t, c):
            f.write(",".join(str(int(x)) for x in row) + "\n")


def load_events_csv(path, dims: CubeDims) -> LidarCube:
    """CSV import; indices are 1-based in the file."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    if data.size == 0:
        return LidarCube(dims, {})
    if data.shape[1] != 5:
        raise CubeError("event CSV must have columns i,j,l,t,count")
    return LidarCube.from_records(dims, data[:, 0] - 1, data[:, 1] - 1, data[:, 2] - 1, data[:, 3], data[:, 4])


def save_mask_csv(mask: SamplingMask, path) -> None:
    """CSV of sampled (i,j,l) triples, 1-based, with a dims header comment."""
    nr, nc, nb = mask.shape
    ii, jj, ll = np.nonzero(mask.bits)
    with open(path, "w") as f:
        f.write(f"# dims,{nr},{nc},{nb}\n")
        f.write("i,j,l\n")
        for i, j, l in zip(ii, jj, ll):
            f.write(f"{i + 1},{j + 1},{l + 1}\n")


def load_mask_csv(path) -> SamplingMask:
    with open(path) as f:
        first = f.readline().strip()
        if not first.startswith("# dims,"):
            raise CubeError("mask CSV must start with '# dims,rows,cols,bands'")
        nr, nc, nb = (int(x) for x in first.split(",")[1:4])
        header = f.readline()
        if header.strip() != "i,j,l":
            raise CubeError("mask CSV must have columns i,j,l")
        bits = np.zeros((nr, nc, nb), dtype=np.uint8)
        for line in f:
            line = line.strip()
            if not line:
                continue
            i, j, l = (int(x) for x in line.split(","))
            bits[i - 1, j - 1, l - 1] = 1
    return SamplingMask(bits)
