"""Zero-phase Butterworth smoothing of solved pose tracks."""

from __future__ import annotations

import numpy as np
from scipy.signal import butter, filtfilt

from .geometry import matrix_to_rot6d, rot6d_to_matrix


class FilterError(ValueError):
    pass


def butterworth_lowpass(series: np.ndarray, sample_rate: float, cutoff: float = 5.0, order: int = 2) -> np.ndarray:
    """Forward-backward Butterworth low-pass along axis 0.

    Edges are extended by odd reflection over ``3 * order`` samples before
    filtering, so the series must be longer than that.
    """
    x = np.asarray(series, dtype=float)
    if order < 1:
        raise FilterError("filter order must be at least 1")
    if not 0 < cutoff < sample_rate / 2:
        raise FilterError(f"cutoff {cutoff} Hz must lie in (0, {sample_rate / 2}) (Nyquist)")
    pad = 3 * order
    if x.shape[0] <= pad:
        raise FilterError(f"series too short: {x.shape[0]} samples, need more than {pad}")
    b, a = butter(order, cutoff, btype="low", fs=sample_rate)
    return filtfilt(b, a, x, axis=0, padtype="odd", padlen=pad)


def squared_magnitude_response(freq: float, sample_rate: float, cutoff: float, order: int) -> float:
    """|H|^2 of the digital Butterworth obtained by a prewarped bilinear transform.

    For the two-pass filter this is also the amplitude gain at ``freq``.
    """
    w = np.tan(np.pi * freq / sample_rate) / np.tan(np.pi * cutoff / sample_rate)
    return float(1.0 / (1.0 + w ** (2 * order)))


def orthonormalize_6d(o6: np.ndarray) -> np.ndarray:
    """Map each row of an (N, 6) array back onto a valid rotation's 6D embedding."""
    return np.array([matrix_to_rot6d(rot6d_to_matrix(r)) for r in np.asarray(o6, dtype=float)])


def filter_hand_records(records: list[dict], sample_rate: float, cutoff: float = 5.0, order: int = 2) -> list[dict]:
    """Smooth t, o6 and phi of hand-track records; other fields are copied through."""
    if not records:
        return []
    t = butterworth_lowpass(np.array([r["t"] for r in records]), sample_rate, cutoff, order)
    o6 = orthonormalize_6d(butterworth_lowpass(np.array([r["o6"] for r in records]), sample_rate, cutoff, order))
    phi = butterworth_lowpass(np.array([r["phi"] for r in records]), sample_rate, cutoff, order)
    out = []
    for k, r in enumerate(records):
        rec = dict(r)
        rec.update(t=t[k].tolist(), o6=o6[k].tolist(), phi=phi[k].tolist(), filtered=True)
        out.append(rec)
    return out


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    runs, start = [], None
    for k, m in enumerate(mask):
        if m and start is None:
            start = k
        elif not m and start is not None:
            runs.append((start, k))
            start = None
    if start is not None:
        runs.append((start, len(mask)))
    return runs


def filter_rigid_records(records: list[dict], sample_rate: float, cutoff: float = 5.0, order: int = 2) -> list[dict]:
    """Smooth R (via its 6D embedding) and t of object/cube records.

    Frames without a pose split the series; each valid run long enough to
    filter is smoothed independently, shorter runs pass through unchanged.
    """
    valid = np.array([r.get("R") is not None for r in records], dtype=bool)
    out = [dict(r) for r in records]
    for a, b in _runs(valid):
        if b - a <= 3 * order:
            continue
        R = np.array([np.reshape(records[k]["R"], (3, 3)) for k in range(a, b)])
        o6 = orthonormalize_6d(butterworth_lowpass(np.array([matrix_to_rot6d(m) for m in R]), sample_rate, cutoff, order))
        t = butterworth_lowpass(np.array([records[k]["t"] for k in range(a, b)]), sample_rate, cutoff, order)
        for i, k in enumerate(range(a, b)):
            out[k].update(R=rot6d_to_matrix(o6[i]).ravel().tolist(), t=t[i].tolist(), filtered=True)
    return out
