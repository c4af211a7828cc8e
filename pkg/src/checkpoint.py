#!/usr/bin/env python3
"""
Parameter checkpoints.

A checkpoint is two files sharing a stem:
- <stem>.bin: every array back to back as little-endian float32
- <stem>.manifest: '# key=value' metadata lines, then one
  'name<TAB>shape<TAB>offset' line per array (shape as 'AxBxC', offset in bytes)
"""

import logging
import os
from typing import Dict, Tuple

import numpy as np

logger = logging.getLogger(__name__)

PAYLOAD_DTYPE = np.dtype('<f4')


class CheckpointError(Exception):
    """Exception raised for checkpoint read/write errors."""
    pass


def checkpoint_paths(stem: str) -> Tuple[str, str]:
    return f"{stem}.bin", f"{stem}.manifest"


def save_checkpoint(stem: str, arrays: Dict[str, np.ndarray], metadata: Dict[str, str] = None):
    """
    Write named arrays and metadata to <stem>.bin and <stem>.manifest.

    Args:
        stem: Output path without extension
        arrays: Ordered mapping of name to array
        metadata: String metadata recorded in the manifest header
    """
    payload_path, manifest_path = checkpoint_paths(stem)
    os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)

    lines = [f"# {key}={value}" for key, value in (metadata or {}).items()]
    offset = 0
    with open(payload_path, 'wb') as payload:
        for name, array in arrays.items():
            if '\t' in name or '\n' in name:
                raise CheckpointError(f"Invalid array name '{name}'")
            data = np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE)
            shape = 'x'.join(str(d) for d in data.shape) or 'scalar'
            lines.append(f"{name}\t{shape}\t{offset}")
            payload.write(data.tobytes())
            offset += data.nbytes

    with open(manifest_path, 'w') as manifest:
        manifest.write('\n'.join(lines) + '\n')
    logger.info(f"Saved checkpoint with {len(arrays)} arrays ({offset} bytes) to {payload_path}")


def load_checkpoint(stem: str) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        Tuple of (arrays, metadata); arrays are float32 in manifest order

    Raises:
        CheckpointError: If a file is missing or the manifest and payload disagree
    """
    payload_path, manifest_path = checkpoint_paths(stem)
    for path in (payload_path, manifest_path):
        if not os.path.exists(path):
            raise CheckpointError(f"Checkpoint file not found: {path}")

    with open(payload_path, 'rb') as f:
        payload = f.read()

    arrays: Dict[str, np.ndarray] = {}
    metadata: Dict[str, str] = {}
    expected_offset = 0
    with open(manifest_path) as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip('\n')
            if not line:
                continue
            if line.startswith('#'):
                key, _, value = line[1:].strip().partition('=')
                metadata[key] = value
                continue
            try:
                name, shape_text, offset_text = line.split('\t')
                shape = () if shape_text == 'scalar' else tuple(int(d) for d in shape_text.split('x'))
                offset = int(offset_text)
            except ValueError:
                raise CheckpointError(f"{manifest_path}:{line_number}: malformed entry '{line}'")
            if offset != expected_offset:
                raise CheckpointError(
                    f"{manifest_path}:{line_number}: '{name}' at offset {offset}, expected {expected_offset}")
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * PAYLOAD_DTYPE.itemsize
            if offset + nbytes > len(payload):
                raise CheckpointError(
                    f"{payload_path}: '{name}' needs bytes {offset}..{offset + nbytes}, payload has {len(payload)}")
            arrays[name] = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=count, offset=offset).reshape(shape).copy()
            expected_offset = offset + nbytes

    if expected_offset != len(payload):
        raise CheckpointError(f"{payload_path}: manifest covers {expected_offset} bytes, payload has {len(payload)}")
    logger.debug(f"Loaded checkpoint with {len(arrays)} arrays from {payload_path}")
    return arrays, metadata
