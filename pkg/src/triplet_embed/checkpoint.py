"""Model checkpoint files.

Layout (all integers little-endian):

    offset  size  field
    0       8     magic b"TRPEMB\\x00\\x01"
    8       4     format version (uint32, currently 1)
    12      4     length L of the layer listing in bytes (uint32)
    16      L     layer listing, UTF-8, one layer per LF-terminated line;
                  the first line is "input <S>[ <input_norm>]"
    16+L    ...   parameter arrays in declaration order (W then b for each
                  conv/dense layer), C order, float64 little-endian

Array shapes are not stored; they follow from the layer listing.
"""

import struct

import numpy as np

from .errors import ParseError, StructuralError
from .network import Network

MAGIC = b"TRPEMB\x00\x01"
VERSION = 1


def encode(net, params):
    net.check_params(params)
    listing = "".join(line + "\n" for line in net.spec_lines()).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(listing)), listing]
    parts += [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in params]
    return b"".join(parts)


def decode(data):
    """Return (network, params) from checkpoint bytes."""
    if data[:8] != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)", 0)
    if len(data) < 16:
        raise ParseError("truncated header", len(data))
    version, n = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 8)
    if len(data) < 16 + n:
        raise ParseError("truncated layer listing", len(data))
    try:
        lines = data[16:16 + n].decode("utf-8").splitlines()
        net = Network.from_spec_lines(lines)
    except (UnicodeDecodeError, StructuralError, ValueError, IndexError) as e:
        raise ParseError(f"bad layer listing: {e}", 16) from e
    pos = 16 + n
    params = []
    for shape in net.param_shapes:
        count = int(np.prod(shape))
        if len(data) < pos + 8 * count:
            raise ParseError("truncated parameter data", len(data))
        params.append(np.frombuffer(data, dtype="<f8", count=count, offset=pos)
                      .astype(np.float64).reshape(shape))
        pos += 8 * count
    if pos != len(data):
        raise ParseError("trailing bytes after parameters", pos)
    return net, params


def save(path, net, params):
    with open(path, "wb") as fh:
        fh.write(encode(net, params))


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
