"""Synthetic microseismic data: Ricker spectra, forward modeling, noise and
time-domain synthesis, plus the spectral data file format.

Data file layout: a 64-byte ASCII header ``MSEDATA <nfreq> <nrec> c16 1``
followed by ``nfreq`` float64 angular frequencies, ``nrec`` int64 receiver
indices, ``nfreq`` blocks of ``nrec`` complex128 samples (little endian) and
a trailing UTF-8 JSON object with provenance metadata.
"""
from dataclasses import dataclass, field
import json
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spl

from .grid import (
    HEADER_SIZE,
    GridFormatError,
    _decode_header,
    _encode_header,
    interior_flat_index,
)
from .helmholtz import SamplingOperator, assemble

DATA_MAGIC = "MSEDATA"


def ricker_spectrum(f_central, t_central, omega, normalize=False):
    """Ricker wavelet spectrum at angular frequency ``omega``.

    ``W = 2 w^2 / (sqrt(pi) wp^3) exp(-w^2 / wp^2) exp(-i w t_central)`` with
    ``wp = 2 pi f_central``. With ``normalize`` the amplitude peaks at 1 (at
    ``w = wp``).
    """
    if not f_central > 0:
        raise ValueError("central frequency must be positive")
    omega = np.asarray(omega, dtype=float)
    wp = 2 * np.pi * f_central
    if normalize:
        amp = (omega / wp) ** 2 * np.exp(1.0 - (omega / wp) ** 2)
    else:
        amp = 2 * omega**2 / (np.sqrt(np.pi) * wp**3) * np.exp(-(omega**2) / wp**2)
    return amp * np.exp(-1j * omega * t_central)


@dataclass(frozen=True)
class SyntheticEvent:
    """Point source at (z, x) meters with a Ricker signature."""

    z: float
    x: float
    f_central: float
    t_central: float

    def cell(self, grid):
        return grid.cell_of(self.z, self.x)

    def signature(self, omegas):
        return ricker_spectrum(self.f_central, self.t_central, omegas, normalize=True)


@dataclass
class SpectraData:
    """Blended-source record: ``values[k]`` is d(omega_k) over the receivers."""

    omegas: np.ndarray
    receivers: np.ndarray
    values: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.omegas = np.asarray(self.omegas, dtype=float)
        self.receivers = np.asarray(self.receivers, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (self.omegas.size, self.receivers.size):
            raise ValueError(
                f"data shape {self.values.shape} does not match "
                f"({self.omegas.size} frequencies, {self.receivers.size} receivers)"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("data contain non-finite values")

    def check_acquisition(self, acquisition):
        if not np.array_equal(self.receivers, np.asarray(acquisition.receivers)):
            raise ValueError("data receivers do not match the acquisition")
        if not np.allclose(self.omegas, acquisition.omegas, rtol=1e-12, atol=0):
            raise ValueError("data frequencies do not match the acquisition")

    def scaled(self, c):
        return SpectraData(self.omegas, self.receivers, c * self.values, dict(self.metadata))


def forward_wavefields(model, events, acquisition, pml_velocity=None):
    """True wavefields ``A(m, w)^-1 Phi s(w)`` for every frequency (q x N_pad)."""
    grid = model.grid
    cells = [grid.cell_of(e.z, e.x) for e in events]
    index = [interior_flat_index(i, j, grid) for i, j in cells]
    if len(set(index)) != len(index):
        raise ValueError("two events share a grid cell")
    out = np.zeros((len(acquisition.frequencies), grid.n_pad), dtype=complex)
    if not events:
        return out
    for k, w in enumerate(acquisition.omegas):
        b = np.zeros(grid.n_pad, dtype=complex)
        for idx, e in zip(index, events):
            b[idx] += e.signature(w)
        op = assemble(model, w, pml_velocity)
        out[k] = spl.spsolve(op.matrix.tocsc(), b)
    return out


def add_noise(values, snr_db, rng):
    """Add circular complex Gaussian noise at exactly ``snr_db`` over the dataset.

    The SNR is ``10 log10(mean |d|^2 / mean |n|^2)``; the drawn noise is
    rescaled so its empirical power matches the target.
    """
    values = np.asarray(values, dtype=complex)
    noise = rng.standard_normal(values.shape) + 1j * rng.standard_normal(values.shape)
    p_signal = np.mean(np.abs(values) ** 2)
    if p_signal == 0:
        return values.copy()
    p_target = p_signal / 10 ** (snr_db / 10)
    noise *= np.sqrt(p_target / np.mean(np.abs(noise) ** 2))
    return values + noise


def empirical_snr_db(clean, noisy):
    clean = np.asarray(clean)
    return 10 * np.log10(np.mean(np.abs(clean) ** 2) / np.mean(np.abs(noisy - clean) ** 2))


def synthesize_data(true_model, events, acquisition, seed=0, snr_db=None, pml_velocity=None):
    """Forward-model blended-source data, optionally with noise at ``snr_db``."""
    fields = forward_wavefields(true_model, events, acquisition, pml_velocity)
    P = SamplingOperator.from_acquisition(acquisition)
    values = fields[:, P.index]
    if snr_db is not None:
        values = add_noise(values, snr_db, np.random.default_rng(seed))
    meta = {
        "seed": int(seed),
        "snr_db": None if snr_db is None else float(snr_db),
        "events": [
            {"z": e.z, "x": e.x, "f_central": e.f_central, "t_central": e.t_central} for e in events
        ],
    }
    return SpectraData(acquisition.omegas, np.asarray(acquisition.receivers), values, meta)


def hermitian_synthesis(spectra, omegas, times):
    """Complex inverse transform over the band and its mirrored negative half.

    ``x(t) = 1/2 sum_k [D_k exp(i w_k t) + conj(D_k) exp(-i w_k t)]``; the
    result is real up to rounding.
    """
    spectra = np.atleast_2d(np.asarray(spectra, dtype=complex))   # q x Nr
    E = np.exp(1j * np.outer(np.asarray(times, dtype=float), omegas))   # Nt x q
    return 0.5 * ((E @ spectra) + (E.conj() @ spectra.conj())).T  # Nr x Nt


def synthesize_seismograms(spectra, omegas, times):
    """Real Nr x Nt seismograms from q x Nr spectra sampled at ``omegas``."""
    t = np.asarray(times, dtype=float)
    if t.size > 2 and not np.allclose(np.diff(t), t[1] - t[0], rtol=1e-9, atol=0):
        raise ValueError("time axis must be uniform")
    return hermitian_synthesis(spectra, omegas, t).real


# --- file IO -------------------------------------------------------------------

def write_data(data, path):
    q, nr = data.values.shape
    meta = json.dumps(data.metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_encode_header(DATA_MAGIC, q, nr, "c16", 1))
        fh.write(data.omegas.astype("<f8").tobytes())
        fh.write(data.receivers.astype("<i8").tobytes())
        fh.write(data.values.astype("<c16").tobytes())
        fh.write(meta)


def read_data(path):
    raw = Path(path).read_bytes()
    tokens = _decode_header(raw, DATA_MAGIC)
    try:
        q, nr = int(tokens[0]), int(tokens[1])
    except (IndexError, ValueError) as exc:
        raise GridFormatError("malformed data header") from exc
    if len(tokens) != 4 or tokens[2] != "c16" or q <= 0 or nr <= 0:
        raise GridFormatError("malformed data header")
    off = HEADER_SIZE
    need = off + 8 * q + 8 * nr + 16 * q * nr
    if len(raw) < need:
        raise GridFormatError("data file payload is truncated")
    omegas = np.frombuffer(raw, "<f8", q, off)
    off += 8 * q
    receivers = np.frombuffer(raw, "<i8", nr, off)
    off += 8 * nr
    values = np.frombuffer(raw, "<c16", q * nr, off).reshape(q, nr)
    off += 16 * q * nr
    try:
        meta = json.loads(raw[off:].decode("utf-8")) if len(raw) > off else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise GridFormatError("data metadata is not valid JSON") from exc
    if not np.all(np.isfinite(values)):
        raise GridFormatError("data file contains non-finite values")
    return SpectraData(omegas.copy(), receivers.copy(), values.copy(), meta)
