#!/usr/bin/env python3
"""
Band-sequential raster files.

A raster is '<stem>.raw' (little-endian, band-sequential payload) plus a
'<stem>.hdr' text sidecar:

    bands=<int>
    rows=<int>
    cols=<int>
    dtype=float32|uint16
    interleave=bsq
    byteorder=little
"""

import logging
import os
from typing import Dict, Tuple

import numpy as np

logger = logging.getLogger(__name__)

DTYPES = {'float32': np.dtype('<f4'), 'uint16': np.dtype('<u2')}


class DataError(Exception):
    """Exception raised for invalid input data."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class RasterFormatError(DataError):
    """Exception raised when a raster header and payload disagree."""

    def __init__(self, message: str, path: str = None, expected_bytes: int = None, actual_bytes: int = None):
        self.path = path
        self.expected_bytes = expected_bytes
        self.actual_bytes = actual_bytes
        super().__init__(message)


def raster_paths(stem: str) -> Tuple[str, str]:
    if stem.endswith('.raw') or stem.endswith('.hdr'):
        stem = stem[:-4]
    return f"{stem}.raw", f"{stem}.hdr"


def write_raster(stem: str, data: np.ndarray, dtype: str):
    """
    Write a [bands, rows, cols] array.

    Args:
        stem: Output path without extension
        data: Array of shape [bands, rows, cols] (or [rows, cols] for one band)
        dtype: 'float32' or 'uint16'
    """
    if dtype not in DTYPES:
        raise RasterFormatError(f"Unknown dtype '{dtype}', expected one of {sorted(DTYPES)}", path=stem)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise DataError(f"Raster must be [bands, rows, cols], got shape {data.shape}")
    if dtype == 'float32':
        _check_finite(data, stem)

    raw_path, hdr_path = raster_paths(stem)
    os.makedirs(os.path.dirname(os.path.abspath(raw_path)), exist_ok=True)
    bands, rows, cols = data.shape
    with open(hdr_path, 'w') as f:
        f.write(f"bands={bands}\nrows={rows}\ncols={cols}\ndtype={dtype}\ninterleave=bsq\nbyteorder=little\n")
    with open(raw_path, 'wb') as f:
        f.write(np.ascontiguousarray(data, dtype=DTYPES[dtype]).tobytes())
    logger.debug(f"Wrote {bands}x{rows}x{cols} {dtype} raster to {raw_path}")


def read_header(hdr_path: str) -> Dict[str, str]:
    if not os.path.exists(hdr_path):
        raise RasterFormatError(f"Header file not found: {hdr_path}", path=hdr_path)
    header = {}
    with open(hdr_path) as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            if '=' not in line:
                raise RasterFormatError(f"{hdr_path}:{line_number}: expected key=value, got '{line}'", path=hdr_path)
            key, value = line.split('=', 1)
            header[key.strip()] = value.strip()
    return header


def read_raster(stem: str, expected_dtype: str = None) -> np.ndarray:
    """
    Read a raster written by write_raster.

    Returns:
        Array of shape [bands, rows, cols]

    Raises:
        RasterFormatError: If the header is incomplete, names an unknown dtype,
            or the payload size disagrees with the header
        DataError: If a float raster contains non-finite values
    """
    raw_path, hdr_path = raster_paths(stem)
    header = read_header(hdr_path)
    try:
        bands, rows, cols = int(header['bands']), int(header['rows']), int(header['cols'])
    except KeyError as e:
        raise RasterFormatError(f"{hdr_path}: missing header field {e}", path=hdr_path)
    except ValueError as e:
        raise RasterFormatError(f"{hdr_path}: non-integer dimension: {e}", path=hdr_path)

    dtype = header.get('dtype')
    if dtype not in DTYPES:
        raise RasterFormatError(f"{hdr_path}: unknown dtype '{dtype}', expected one of {sorted(DTYPES)}", path=hdr_path)
    if expected_dtype and dtype != expected_dtype:
        raise RasterFormatError(f"{hdr_path}: dtype is '{dtype}', expected '{expected_dtype}'", path=hdr_path)
    if header.get('interleave', 'bsq') != 'bsq':
        raise RasterFormatError(f"{hdr_path}: only bsq interleave is supported", path=hdr_path)
    if header.get('byteorder', 'little') != 'little':
        raise RasterFormatError(f"{hdr_path}: only little-endian payloads are supported", path=hdr_path)

    if not os.path.exists(raw_path):
        raise RasterFormatError(f"Payload file not found: {raw_path}", path=raw_path)
    expected_bytes = bands * rows * cols * DTYPES[dtype].itemsize
    actual_bytes = os.path.getsize(raw_path)
    if actual_bytes != expected_bytes:
        raise RasterFormatError(
            f"{raw_path}: header {bands}x{rows}x{cols} {dtype} needs {expected_bytes} bytes, payload has {actual_bytes}",
            path=raw_path, expected_bytes=expected_bytes, actual_bytes=actual_bytes)

    data = np.fromfile(raw_path, dtype=DTYPES[dtype]).reshape(bands, rows, cols)
    if dtype == 'float32':
        _check_finite(data, raw_path)
    logger.debug(f"Read {bands}x{rows}x{cols} {dtype} raster from {raw_path}")
    return data


def _check_finite(data: np.ndarray, location: str):
    bad = ~np.isfinite(data)
    if bad.any():
        band, row, col = (int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"{location}: non-finite value at band {band}, row {row}, col {col}")
