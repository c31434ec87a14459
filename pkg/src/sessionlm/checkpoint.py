"""Single-file checkpoint container: text manifest + raw little-endian payloads.

Layout::

    SLMCKPT1 <array count> <manifest byte length>\n
    <manifest: one line per array "name dtype dim0,dim1,... offset nbytes">
    <payload bytes, offsets relative to payload start>

Array names are namespaced by parameter group, e.g. ``sbr.item_embeddings``
or ``lora.block0.q.a``.
"""

import numpy as np

from .errors import DataError, MissingArtifactError

_MAGIC = "SLMCKPT1"

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
}


def save_arrays(path, arrays):
    """Write a name -> ndarray mapping; insertion order is preserved."""
    manifest_lines = []
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise DataError(f"unsupported checkpoint dtype {arr.dtype} for {name}")
        raw = arr.astype(_DTYPES[arr.dtype.name], copy=False).tobytes()
        dims = ",".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        manifest_lines.append(
            f"{name} {arr.dtype.name} {dims} {offset} {len(raw)}\n"
        )
        payloads.append(raw)
        offset += len(raw)
    manifest = "".join(manifest_lines).encode()
    with open(path, "wb") as fh:
        fh.write(f"{_MAGIC} {len(manifest_lines)} {len(manifest)}\n".encode())
        fh.write(manifest)
        for raw in payloads:
            fh.write(raw)


def load_arrays(path):
    """Read a container back into an ordered name -> ndarray mapping."""
    try:
        fh = open(path, "rb")
    except FileNotFoundError:
        raise MissingArtifactError(f"checkpoint not found: {path}") from None
    with fh:
        header = fh.readline().decode()
        parts = header.split()
        if len(parts) != 3 or parts[0] != _MAGIC:
            raise DataError(f"not a checkpoint container: {path}")
        count, manifest_len = int(parts[1]), int(parts[2])
        manifest = fh.read(manifest_len).decode().splitlines()
        if len(manifest) != count:
            raise DataError(f"manifest is truncated in {path}")
        payload = fh.read()
    arrays = {}
    for line in manifest:
        name, dtype_name, dims, offset, nbytes = line.split()
        offset, nbytes = int(offset), int(nbytes)
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split(","))
        raw = payload[offset : offset + nbytes]
        arr = np.frombuffer(raw, dtype=_DTYPES[dtype_name]).astype(dtype_name)
        arrays[name] = arr.reshape(shape)
    return arrays
