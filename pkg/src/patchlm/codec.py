"""Time-series input/output representation.

A raw (possibly multivariate, possibly gappy) series becomes model input
in four steps: visible-value standardization + arcsinh compression,
segmentation into non-overlapping length-P patches, per-patch feature
assembly [time ramp; values; validity mask; channel ramp], and -- on the
way back out -- the exact sinh inverse of the normalization.

Statistics are computed per channel over finite values only, using the
population standard deviation clamped to ``SIGMA_FLOOR``.  Channels are
laid out one after another along the patch axis, with the time ramp
resetting at each channel boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import DataError, InvalidSeriesError

SIGMA_FLOOR = 1e-6


@dataclass
class RawSeries:
    """[C, L] float values with NaN marking missing points."""

    values: np.ndarray
    series_id: str = ""
    freq: str | None = None

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"series must be [C, L] with C,L >= 1, got shape {arr.shape}")
        self.values = arr

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class NormStats:
    """Per-channel visible mean / clamped population std."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", np.atleast_1d(np.asarray(self.mu, dtype=np.float64)))
        object.__setattr__(self, "sigma", np.atleast_1d(np.asarray(self.sigma, dtype=np.float64)))
        if self.mu.shape != self.sigma.shape:
            raise DataError("mu and sigma must have matching shapes")
        if np.any(self.sigma < SIGMA_FLOOR):
            raise DataError(f"sigma below floor {SIGMA_FLOOR}")


@dataclass
class PatchBatch:
    """Patched features ready for the patch projection.

    features rows are ordered channel 0 patches, then channel 1, ...;
    each row is the 4P vector [ramp; values; mask; channel].
    """

    features: np.ndarray          # [T_total, 4P] float32
    validity: np.ndarray          # [T_total, P] bool
    norm_stats: NormStats
    patch_len: int
    channel_slices: list[slice] = field(default_factory=list)
    length: int = 0               # original L (per channel)

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]


def compute_visible_stats(series: RawSeries) -> NormStats:
    """Mean / population std over finite values, per channel."""
    mu = np.empty(series.n_channels)
    sigma = np.empty(series.n_channels)
    for c in range(series.n_channels):
        visible = series.values[c][np.isfinite(series.values[c])]
        if visible.size == 0:
            raise InvalidSeriesError(f"channel {c} has no finite values")
        mu[c] = visible.mean()
        sigma[c] = max(float(visible.std()), SIGMA_FLOOR)
    return NormStats(mu, sigma)


def normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """arcsinh((x - mu) / sigma); NaN passes through."""
    values = np.asarray(values, dtype=np.float64)
    squeeze = values.ndim == 1
    if squeeze:
        values = values[None, :]
    out = np.arcsinh((values - stats.mu[:, None]) / stats.sigma[:, None])
    return out[0] if squeeze else out


def denormalize(normed: np.ndarray, stats: NormStats) -> np.ndarray:
    """Exact inverse: sinh(q) * sigma + mu."""
    normed = np.asarray(normed, dtype=np.float64)
    squeeze = normed.ndim == 1
    if squeeze:
        normed = normed[None, :]
    out = np.sinh(normed) * stats.sigma[:, None] + stats.mu[:, None]
    return out[0] if squeeze else out


def build_time_ramp(length: int) -> np.ndarray:
    """Per-position ramp (i + 1 - L) / L: near -1 at the start, exactly 0 at the end."""
    if length < 1:
        raise DataError("ramp needs length >= 1")
    i = np.arange(length, dtype=np.float64)
    return (i + 1.0 - length) / length


def extend_time_ramp(length: int, start: int, count: int) -> np.ndarray:
    """Ramp values for positions start..start+count-1 under the length-L formula.

    Positions past the end of the context take values > 0 (generation)."""
    i = np.arange(start, start + count, dtype=np.float64)
    return (i + 1.0 - length) / length


def build_channel_ramp(n_channels: int) -> np.ndarray:
    """Channel j -> j / max(C - 1, 1); a single channel maps to 0."""
    if n_channels < 1:
        raise DataError("need at least one channel")
    return np.arange(n_channels, dtype=np.float64) / max(n_channels - 1, 1)


def _pad_to_patches(x: np.ndarray, patch_len: int, fill: float = 0.0) -> np.ndarray:
    n_patches = math.ceil(x.size / patch_len)
    padded = np.full(n_patches * patch_len, fill, dtype=np.float64)
    padded[: x.size] = x
    return padded.reshape(n_patches, patch_len)


def assemble_features(ramp: np.ndarray, values: np.ndarray, validity: np.ndarray,
                      channel: np.ndarray) -> np.ndarray:
    """Concatenate the four P-blocks in the fixed order [r; v; m; c]."""
    blocks = (ramp, values, validity, channel)
    if len({b.shape for b in blocks}) != 1:
        raise DataError("feature blocks must share one [T, P] shape")
    return np.concatenate(blocks, axis=-1).astype(np.float32)


def patchify(series: RawSeries, patch_len: int, stats: NormStats | None = None) -> PatchBatch:
    """Normalize, patch, and assemble features for every channel."""
    if patch_len < 1:
        raise DataError("patch_len must be >= 1")
    if stats is None:
        stats = compute_visible_stats(series)
    normed = normalize(series.values, stats)
    channel_vals = build_channel_ramp(series.n_channels)

    feats = []
    valids = []
    slices = []
    row = 0
    length = series.length
    for c in range(series.n_channels):
        finite = np.isfinite(series.values[c])
        v = np.where(finite, normed[c], 0.0)
        m = finite.astype(np.float64)
        r = build_time_ramp(length)
        v_p = _pad_to_patches(v, patch_len)
        m_p = _pad_to_patches(m, patch_len)
        r_p = _pad_to_patches(r, patch_len)
        # pads (beyond L) zero every block; interior NaNs keep ramp/channel
        in_len = _pad_to_patches(np.ones(length), patch_len)
        c_p = channel_vals[c] * in_len
        feats.append(assemble_features(r_p, v_p, m_p, c_p))
        valids.append(m_p.astype(bool))
        t = v_p.shape[0]
        slices.append(slice(row, row + t))
        row += t

    return PatchBatch(
        features=np.concatenate(feats, axis=0),
        validity=np.concatenate(valids, axis=0),
        norm_stats=stats,
        patch_len=patch_len,
        channel_slices=slices,
        length=length,
    )


# ---------------------------------------------------------------------
# JSON-lines ingestion: {"id": str, "values": [...] | [[...]], "freq": str?}
# NaN encodes as null.
# ---------------------------------------------------------------------

def series_from_record(record: dict) -> RawSeries:
    if "values" not in record:
        raise DataError("series record missing 'values'")
    raw = record["values"]
    if raw and isinstance(raw[0], list):
        rows = [[np.nan if v is None else float(v) for v in row] for row in raw]
        if len({len(r) for r in rows}) != 1:
            raise DataError("channels must share one length")
        values = np.asarray(rows)
    else:
        values = np.asarray([np.nan if v is None else float(v) for v in raw])
    return RawSeries(values, series_id=str(record.get("id", "")), freq=record.get("freq"))


def series_to_record(series: RawSeries) -> dict:
    def encode_row(row):
        return [None if not np.isfinite(v) else float(v) for v in row]

    values = [encode_row(row) for row in series.values]
    if series.n_channels == 1:
        values = values[0]
    record = {"id": series.series_id, "values": values}
    if series.freq:
        record["freq"] = series.freq
    return record


def read_series_jsonl(path: str) -> Iterator[RawSeries]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            yield series_from_record(record)


def write_series_jsonl(path: str, series_list) -> None:
    with open(path, "w") as fh:
        for s in series_list:
            fh.write(json.dumps(series_to_record(s)) + "\n")
