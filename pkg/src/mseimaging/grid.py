"""Grid geometry, squared-slowness models, acquisition and grid file IO.

Index convention: row-major over the padded grid, depth first::

    k = i * nx_pad + j

The padded grid appends ``pml_width`` absorbing cells on the left, right and
bottom. The top edge is the free surface and is never padded, so interior
cell ``(i, j)`` sits at padded position ``(i, j + pml_width)``.

File layout (grid and model files): a 64-byte ASCII header
``MSEGRID <nz> <nx> <h> <dtype> <nfields>`` padded with spaces and
terminated by a newline, followed by little-endian float64 payload. Complex
grids (``dtype=c16``) store interleaved (real, imag) pairs.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEADER_SIZE = 64
GRID_MAGIC = "MSEGRID"


class GridFormatError(ValueError):
    """Raised for malformed or inconsistent grid files."""


@dataclass(frozen=True)
class Grid:
    """Uniform square-cell grid with an absorbing layer on three sides."""

    nz: int
    nx: int
    h: float
    pml_width: int = 20

    def __post_init__(self):
        if self.nz < 3 or self.nx < 3:
            raise ValueError(f"grid must be at least 3x3, got {self.nz}x{self.nx}")
        if not self.h > 0:
            raise ValueError(f"grid spacing must be positive, got {self.h}")
        if self.pml_width < 0:
            raise ValueError("pml_width must be nonnegative")

    @property
    def shape(self):
        return (self.nz, self.nx)

    @property
    def n(self):
        return self.nz * self.nx

    @property
    def nz_pad(self):
        return self.nz + self.pml_width

    @property
    def nx_pad(self):
        return self.nx + 2 * self.pml_width

    @property
    def padded_shape(self):
        return (self.nz_pad, self.nx_pad)

    @property
    def n_pad(self):
        return self.nz_pad * self.nx_pad

    def interior_indices(self):
        """Flat padded indices of the interior cells, in interior row-major order."""
        i, j = np.meshgrid(np.arange(self.nz), np.arange(self.nx), indexing="ij")
        return (i * self.nx_pad + j + self.pml_width).ravel()

    def interior_mask(self):
        mask = np.zeros(self.n_pad, dtype=bool)
        mask[self.interior_indices()] = True
        return mask

    def pad(self, values):
        """Extend an interior field onto the padded grid by edge replication."""
        values = np.asarray(values).reshape(self.shape)
        w = self.pml_width
        return np.pad(values, ((0, w), (w, w)), mode="edge").ravel()

    def restrict(self, values):
        """Interior part of a padded field, flattened."""
        return np.asarray(values)[self.interior_indices()]

    def embed(self, values):
        """Place an interior field in a zero padded vector."""
        values = np.asarray(values).ravel()
        out = np.zeros(self.n_pad, dtype=values.dtype)
        out[self.interior_indices()] = values
        return out

    def coordinates(self, i, j):
        """(z, x) in meters of interior cell (i, j); the surface is z = 0."""
        return i * self.h, j * self.h

    def cell_of(self, z, x):
        """Nearest interior cell to (z, x) meters."""
        i = int(round(z / self.h))
        j = int(round(x / self.h))
        if not (0 <= i < self.nz and 0 <= j < self.nx):
            raise ValueError(f"point ({z}, {x}) m lies outside the interior grid")
        return i, j


def flat_index(i, j, grid):
    """Flat padded index of padded-grid position (i, j)."""
    if not (0 <= i < grid.nz_pad and 0 <= j < grid.nx_pad):
        raise IndexError(f"({i}, {j}) outside padded grid {grid.padded_shape}")
    return int(i) * grid.nx_pad + int(j)


def unflat_index(k, grid):
    """Inverse of :func:`flat_index`."""
    if not (0 <= k < grid.n_pad):
        raise IndexError(f"flat index {k} outside padded grid of size {grid.n_pad}")
    return divmod(int(k), grid.nx_pad)


def interior_flat_index(i, j, grid):
    """Padded flat index of interior cell (i, j)."""
    if not (0 <= i < grid.nz and 0 <= j < grid.nx):
        raise IndexError(f"({i}, {j}) outside interior grid {grid.shape}")
    return flat_index(i, j + grid.pml_width, grid)


def interior_position(k, grid):
    """Interior (i, j) of a padded flat index; raises if k is in the PML."""
    i, j = unflat_index(k, grid)
    j -= grid.pml_width
    if not (0 <= i < grid.nz and 0 <= j < grid.nx):
        raise IndexError(f"flat index {k} lies in the absorbing layer")
    return i, j


def velocity_to_slowness2(v):
    v = np.asarray(v, dtype=float)
    return 1.0 / (v * v)


def slowness2_to_velocity(m):
    return 1.0 / np.sqrt(np.asarray(m, dtype=float))


@dataclass(frozen=True, eq=False)
class Model:
    """Squared slowness (s^2/m^2) on the interior grid, with box bounds.

    Arrays are flattened in interior row-major order and made read-only.
    """

    grid: Grid
    m: np.ndarray
    m_min: np.ndarray = None
    m_max: np.ndarray = None

    def __post_init__(self):
        n = self.grid.n
        m = _as_field(self.m, n, "m")
        m_min = np.full(n, 0.0) if self.m_min is None else _as_field(self.m_min, n, "m_min")
        m_max = np.full(n, np.inf) if self.m_max is None else _as_field(self.m_max, n, "m_max")
        if np.any(m <= 0):
            raise ValueError("squared slowness must be strictly positive")
        if np.any(m_min > m_max):
            raise ValueError("m_min exceeds m_max")
        if np.any(m < m_min) or np.any(m > m_max):
            raise ValueError("model violates its bounds")
        for name, arr in (("m", m), ("m_min", m_min), ("m_max", m_max)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def from_velocity(cls, grid, v, v_min=None, v_max=None):
        """Build a model from velocity (m/s); velocity bounds map to swapped slowness bounds."""
        m = velocity_to_slowness2(v).ravel()
        m_min = None if v_max is None else np.broadcast_to(velocity_to_slowness2(v_max), m.shape)
        m_max = None if v_min is None else np.broadcast_to(velocity_to_slowness2(v_min), m.shape)
        return cls(grid, m, m_min, m_max)

    @property
    def velocity(self):
        return slowness2_to_velocity(self.m)

    def with_m(self, m):
        """Copy with new squared slowness, projected onto the bounds."""
        return Model(self.grid, np.clip(m, self.m_min, self.m_max), self.m_min, self.m_max)

    def __eq__(self, other):
        if not isinstance(other, Model):
            return NotImplemented
        return (
            self.grid == other.grid
            and np.array_equal(self.m, other.m)
            and np.array_equal(self.m_min, other.m_min)
            and np.array_equal(self.m_max, other.m_max)
        )

    __hash__ = None


def _as_field(values, n, name):
    arr = np.array(values, dtype=float).ravel()
    if arr.size != n:
        raise ValueError(f"{name} has {arr.size} entries, expected {n}")
    if name == "m_max":
        if np.any(np.isnan(arr)):
            raise ValueError(f"{name} contains NaN")
    elif not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class Acquisition:
    """Receivers (interior padded flat indices) and angular frequencies (rad/s)."""

    grid: Grid
    receivers: tuple
    frequencies: tuple
    record_duration: float = 0.0

    def __post_init__(self):
        rec = tuple(int(r) for r in self.receivers)
        freqs = tuple(float(w) for w in self.frequencies)
        if len(set(rec)) != len(rec):
            raise ValueError("receiver indices must be distinct")
        interior = self.grid.interior_mask()
        for r in rec:
            if not (0 <= r < self.grid.n_pad) or not interior[r]:
                raise ValueError(f"receiver {r} is not an interior cell")
        if not freqs:
            raise ValueError("at least one frequency is required")
        if any(w <= 0 for w in freqs):
            raise ValueError("frequencies must be positive")
        if any(b <= a for a, b in zip(freqs, freqs[1:])):
            raise ValueError("frequencies must be strictly increasing")
        object.__setattr__(self, "receivers", rec)
        object.__setattr__(self, "frequencies", freqs)

    @property
    def n_receivers(self):
        return len(self.receivers)

    @property
    def omegas(self):
        return np.asarray(self.frequencies)

    @classmethod
    def surface_line(cls, grid, omegas, depth_index=2, step=1, record_duration=0.0):
        """Receivers every ``step`` cells along interior row ``depth_index``."""
        rec = [interior_flat_index(depth_index, j, grid) for j in range(0, grid.nx, step)]
        return cls(grid, rec, tuple(omegas), record_duration)


# --- file IO -----------------------------------------------------------------

def _encode_header(magic, *fields):
    text = " ".join([magic] + [str(f) for f in fields])
    if len(text) > HEADER_SIZE - 1:
        raise GridFormatError("header fields too long")
    return (text.ljust(HEADER_SIZE - 1) + "\n").encode("ascii")


def _decode_header(raw, magic):
    if len(raw) < HEADER_SIZE:
        raise GridFormatError("truncated header")
    try:
        tokens = raw[:HEADER_SIZE].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise GridFormatError("header is not ASCII") from exc
    if not tokens or tokens[0] != magic:
        raise GridFormatError(f"bad magic, expected {magic!r}")
    return tokens[1:]


def write_grid(path, values, h, nfields=1):
    """Write one or more stacked real/complex 2D fields of equal shape."""
    arr = np.asarray(values)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] != nfields:
        raise ValueError(f"expected {nfields} stacked 2D fields, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GridFormatError("refusing to write non-finite values")
    complex_ = np.iscomplexobj(arr)
    dtype = "c16" if complex_ else "f8"
    _, nz, nx = arr.shape
    payload = arr.astype("<c16" if complex_ else "<f8")
    with open(path, "wb") as fh:
        fh.write(_encode_header(GRID_MAGIC, nz, nx, repr(float(h)), dtype, nfields))
        fh.write(payload.tobytes())


def read_grid(path):
    """Read a grid file; returns ``(fields, h)`` with fields of shape (nfields, nz, nx)."""
    raw = Path(path).read_bytes()
    tokens = _decode_header(raw, GRID_MAGIC)
    if len(tokens) != 5:
        raise GridFormatError("malformed grid header")
    try:
        nz, nx = int(tokens[0]), int(tokens[1])
        h = float(tokens[2])
        dtype = tokens[3]
        nfields = int(tokens[4])
    except ValueError as exc:
        raise GridFormatError("malformed grid header") from exc
    if dtype not in ("f8", "c16") or nz <= 0 or nx <= 0 or nfields <= 0:
        raise GridFormatError("malformed grid header")
    np_dtype = np.dtype("<c16" if dtype == "c16" else "<f8")
    expected = nfields * nz * nx * np_dtype.itemsize
    payload = raw[HEADER_SIZE:]
    if len(payload) != expected:
        raise GridFormatError(
            f"dimension mismatch: header declares {nfields}x{nz}x{nx} {dtype} "
            f"({expected} bytes), payload has {len(payload)} bytes"
        )
    fields = np.frombuffer(payload, dtype=np_dtype).reshape(nfields, nz, nx).copy()
    if not np.all(np.isfinite(fields)):
        raise GridFormatError("grid file contains non-finite values")
    return fields, h


def write_model(model, path):
    """Write ``m``, ``m_min``, ``m_max`` as a three-field grid file.

    Infinite upper bounds are stored as the largest float64.
    """
    g = model.grid
    m_max = np.where(np.isinf(model.m_max), np.finfo(float).max, model.m_max)
    stack = np.stack([model.m, model.m_min, m_max]).reshape(3, g.nz, g.nx)
    write_grid(path, stack, g.h, nfields=3)


def read_model(path, pml_width=20):
    fields, h = read_grid(path)
    if np.iscomplexobj(fields):
        raise GridFormatError("model files must be real")
    nfields, nz, nx = fields.shape
    grid = Grid(nz, nx, h, pml_width)
    if nfields == 1:
        return Model(grid, fields[0])
    if nfields != 3:
        raise GridFormatError(f"model file must hold 1 or 3 fields, got {nfields}")
    m_max = fields[2]
    m_max = np.where(m_max == np.finfo(float).max, np.inf, m_max)
    return Model(grid, fields[0], fields[1], m_max)
