"""
Parameter Checkpoints
Flat little-endian binary layout:

    magic  b"SANP"
    u32    format version
    u32    layer count (one entry per weight matrix or bias vector)
    per entry: u32 rows, u32 cols, rows*cols float64 in row-major order

Bias vectors are stored as 1 x n matrices.
"""

import logging
import struct
from pathlib import Path
from typing import List, Union

import numpy as np

from san.errors import CheckpointFormatError
from san.model import NetworkSpec, Parameters

logger = logging.getLogger(__name__)

MAGIC = b"SANP"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")
_DIMS = struct.Struct("<II")


def encode_parameters(params: Parameters) -> bytes:
    """Serialize parameters to the checkpoint byte layout"""
    arrays = params.arrays()
    chunks = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(arrays))]
    for arr in arrays:
        matrix = np.atleast_2d(arr)
        rows, cols = matrix.shape
        chunks.append(_DIMS.pack(rows, cols))
        chunks.append(np.ascontiguousarray(matrix, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_arrays(data: bytes) -> List[np.ndarray]:
    """Parse checkpoint bytes into a list of 2-D float64 arrays"""
    if data[:4] != MAGIC:
        raise CheckpointFormatError("missing SANP magic bytes")
    try:
        version, = _U32.unpack_from(data, 4)
        count, = _U32.unpack_from(data, 8)
    except struct.error as e:
        raise CheckpointFormatError(f"truncated header: {e}")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")

    offset = 12
    arrays = []
    for index in range(count):
        try:
            rows, cols = _DIMS.unpack_from(data, offset)
        except struct.error:
            raise CheckpointFormatError(f"truncated header of entry {index}")
        offset += _DIMS.size
        nbytes = rows * cols * 8
        if offset + nbytes > len(data):
            raise CheckpointFormatError(f"truncated payload of entry {index}")
        arrays.append(np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset)
                      .reshape(rows, cols).astype(np.float64))
        offset += nbytes
    if offset != len(data):
        raise CheckpointFormatError(f"{len(data) - offset} trailing bytes after last entry")
    return arrays


def save_checkpoint(params: Parameters, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_parameters(params))
    logger.info("Checkpoint written", extra={"event": "checkpoint_saved", "file": str(path)})
    return path


def load_checkpoint(path: Union[str, Path], spec: NetworkSpec) -> Parameters:
    """Read a checkpoint and check it against the network layout"""
    arrays = decode_arrays(Path(path).read_bytes())
    shapes = spec.layer_shapes()
    if len(arrays) != 2 * len(shapes):
        raise CheckpointFormatError(
            f"checkpoint holds {len(arrays)} entries, network needs {2 * len(shapes)}")
    restored = []
    for (name, fan_in, fan_out), w, b in zip(shapes, arrays[0::2], arrays[1::2]):
        if w.shape != (fan_in, fan_out) or b.shape != (1, fan_out):
            raise CheckpointFormatError(f"shape mismatch in layer {name}")
        restored.extend([w, b.ravel()])
    return Parameters.from_arrays(spec, restored)
