"""Readers and writers for point clouds, depth / mask images, poses and checkpoints.

Formats
-------
* PLY: ``binary_little_endian 1.0``, one ``vertex`` element with float32
  ``x y z``.
* PFM: grayscale ``Pf``, scale ``-1.0`` (little-endian), rows stored bottom
  to top as the format prescribes; ``+inf`` marks invalid depth.
* PGM: binary ``P5`` with maxval 255; probability ``p`` is stored as
  ``floor(255 p + 0.5)``.
* Pose: one line of 12 numbers, rotation row-major then translation.
* Checkpoint: magic ``PFCK0001`` then little-endian header, transforms,
  view maps and Adam moments (see :func:`save_checkpoint`).
"""

from __future__ import annotations

import struct

import numpy as np

from ._validation import ContractViolation, ParseError
from .geometry import RigidTransform, ViewMaps
from .render_oracle import DepthImage, MaskImage

CHECKPOINT_MAGIC = b"PFCK0001"
_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


class UnsupportedFormat(ParseError):
    pass


def _read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def _header_lines(buf, count):
    """Split the first ``count`` whitespace-separated tokens of a netpbm-style header."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated header", offset=pos)
        tokens.append((buf[start:pos], start))
    # exactly one whitespace byte separates header from data
    return tokens, pos + 1


# -- PLY ---------------------------------------------------------------------

def write_ply(path, points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(pts, dtype="<f4").tobytes())


def read_ply(path):
    """Read vertex positions as float64 (values are exactly the stored float32)."""
    buf = _read_bytes(path)
    end = buf.find(b"end_header")
    if not buf.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file", offset=0)
    nl = buf.find(b"\n", end)
    data_start = nl + 1 if nl >= 0 else len(buf)
    n_vertex = None
    props = []
    element = None
    offset = 0
    for line in buf[:end].split(b"\n"):
        words = line.decode("ascii", "replace").split()
        if not words or words[0] in ("ply", "comment", "obj_info"):
            pass
        elif words[0] == "format":
            if words[1:] != ["binary_little_endian", "1.0"]:
                raise UnsupportedFormat(f"unsupported PLY format {' '.join(words[1:])!r}", offset=offset)
        elif words[0] == "element":
            element = words[1]
            if element != "vertex":
                raise UnsupportedFormat(f"unsupported PLY element {element!r}", offset=offset)
            n_vertex = int(words[2])
        elif words[0] == "property":
            if element != "vertex" or words[1] not in _PLY_TYPES or len(words) != 3:
                raise UnsupportedFormat(f"unsupported PLY property {line!r}", offset=offset)
            props.append((words[2], _PLY_TYPES[words[1]]))
        else:
            raise ParseError(f"unexpected header line {line!r}", offset=offset)
        offset += len(line) + 1
    names = [p[0] for p in props]
    if n_vertex is None or not {"x", "y", "z"} <= set(names):
        raise ParseError("PLY header lacks vertex x/y/z", offset=0)
    dtype = np.dtype(props)
    need = n_vertex * dtype.itemsize
    if len(buf) - data_start < need:
        raise ParseError(f"PLY body truncated: need {need} bytes", offset=data_start)
    rec = np.frombuffer(buf, dtype=dtype, count=n_vertex, offset=data_start)
    return np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)


# -- PFM ---------------------------------------------------------------------

def write_pfm(path, depth):
    d = depth.depth if isinstance(depth, DepthImage) else np.asarray(depth, dtype=np.float64)
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(d[::-1], dtype="<f4").tobytes())


def read_pfm(path):
    buf = _read_bytes(path)
    tokens, data_start = _header_lines(buf, 4)
    (magic, _), (w, w_at), (h, _), (scale, s_at) = tokens
    if magic == b"PF":
        raise UnsupportedFormat("color PFM is not supported", offset=0)
    if magic != b"Pf":
        raise ParseError("not a grayscale PFM file", offset=0)
    try:
        w, h = int(w), int(h)
    except ValueError:
        raise ParseError("bad PFM dimensions", offset=w_at) from None
    try:
        scale = float(scale)
    except ValueError:
        raise ParseError("bad PFM scale", offset=s_at) from None
    if scale >= 0:
        raise UnsupportedFormat("unsupported endianness: big-endian PFM (scale > 0)", offset=s_at)
    need = w * h * 4
    if len(buf) - data_start < need:
        raise ParseError(f"PFM body truncated: need {need} bytes", offset=data_start)
    d = np.frombuffer(buf, dtype="<f4", count=w * h, offset=data_start).reshape(h, w)[::-1]
    return DepthImage(d.astype(np.float64))


# -- PGM ---------------------------------------------------------------------

def quantize_mask(prob):
    return np.floor(np.asarray(prob, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, mask):
    p = mask.prob if isinstance(mask, MaskImage) else np.asarray(mask, dtype=np.float64)
    h, w = p.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantize_mask(p).tobytes())


def read_pgm(path):
    buf = _read_bytes(path)
    tokens, data_start = _header_lines(buf, 4)
    (magic, _), (w, w_at), (h, _), (maxval, m_at) = tokens
    if magic != b"P5":
        raise ParseError("not a binary PGM (P5) file", offset=0)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ParseError("bad PGM header numbers", offset=w_at) from None
    if maxval != 255:
        raise UnsupportedFormat("only maxval 255 is supported", offset=m_at)
    if len(buf) - data_start < w * h:
        raise ParseError("PGM body truncated", offset=data_start)
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=data_start).reshape(h, w)
    return MaskImage(raw / 255.0)


# -- poses, meshes, logs -------------------------------------------------------

def write_pose(path, transform):
    with open(path, "w") as fh:
        fh.write(" ".join(repr(float(x)) for x in transform.as_row()) + "\n")


def read_pose(path):
    with open(path) as fh:
        text = fh.read()
    try:
        values = [float(x) for x in text.split()]
    except ValueError:
        raise ParseError("pose file must contain 12 numbers", line=1) from None
    if len(values) != 12:
        raise ParseError(f"pose file must contain 12 numbers, found {len(values)}", line=1)
    return RigidTransform.from_row(values)


def write_obj(path, mesh):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v " + " ".join(repr(float(x)) for x in v) + "\n")
        for f in mesh.triangles:
            fh.write("f " + " ".join(str(int(i) + 1) for i in f) + "\n")


def write_loss_csv(path, losses, first_iter=0):
    with open(path, "w") as fh:
        fh.write("iter,L_mask,L_depth,L_total\n")
        for i, (lm, ld, lt) in enumerate(np.asarray(losses).reshape(-1, 3)):
            fh.write(f"{first_iter + i},{float(lm)!r},{float(ld)!r},{float(lt)!r}\n")


# -- checkpoints ---------------------------------------------------------------

_CK_HEADER = struct.Struct("<IIIQQddd")


def save_checkpoint(path, maps, state, iteration):
    """Write view maps, Adam state and the iteration counter.

    Layout after the 8-byte magic: ``n_views, height, width`` (u32),
    ``iteration, adam_step`` (u64), ``beta1, beta2, eps`` (f64), then
    ``n_views x 12`` pose numbers, the maps and the two Adam moment arrays,
    all little-endian float64.
    """
    if state.m.shape != maps.data.shape:
        raise ContractViolation("Adam state does not match the view maps")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_CK_HEADER.pack(maps.n_views, maps.height, maps.width, int(iteration),
                                 int(state.step), state.beta1, state.beta2, state.eps))
        poses = np.stack([T.as_row() for T in maps.transforms])
        for arr in (poses, maps.data, state.m, state.v):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(maps, state, iteration)``."""
    from .fit import AdamState

    buf = _read_bytes(path)
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ParseError("bad checkpoint magic", offset=0)
    if len(buf) < 8 + _CK_HEADER.size:
        raise ParseError("checkpoint header truncated", offset=8)
    n, h, w, iteration, step, b1, b2, eps = _CK_HEADER.unpack_from(buf, 8)
    pos = 8 + _CK_HEADER.size
    sizes = [n * 12, n * h * w * 4, n * h * w * 4, n * h * w * 4]
    if len(buf) != pos + 8 * sum(sizes):
        raise ParseError("checkpoint body has the wrong length", offset=pos)
    arrays = []
    for size in sizes:
        arrays.append(np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(np.float64))
        pos += 8 * size
    poses, data, m, v = arrays
    shape = (n, h, w, 4)
    maps = ViewMaps(data.reshape(shape), [RigidTransform.from_row(r) for r in poses.reshape(n, 12)])
    state = AdamState(m.reshape(shape), v.reshape(shape), step, b1, b2, eps)
    return maps, state, iteration
