"""Writes the MAT-v5 parser fixtures in this directory.

Little-endian files come from scipy.io.savemat. The big-endian files are
assembled byte by byte below, following the published level-5 layout, so
the parser is never checked against its own writer. Expected values go to
expected.json.
"""

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import scipy.io

HERE = Path(__file__).parent
MI_INT8, MI_INT16, MI_INT32, MI_UINT32, MI_DOUBLE, MI_MATRIX, MI_COMPRESSED = 1, 3, 5, 6, 9, 14, 15
MX_DOUBLE, MX_INT16 = 6, 10


def pad8(b):
    return b + b"\0" * (-len(b) % 8)


def small_or_full(e, dtype, payload):
    if len(payload) <= 4:
        # Small element: byte count and type share the first four bytes.
        return struct.pack(e + "HH", len(payload), dtype) + payload.ljust(4, b"\0")
    return struct.pack(e + "II", dtype, len(payload)) + pad8(payload)


def matrix(e, name, arr, mx_class, mi_type, fmt):
    rows, cols = arr.shape
    flags = struct.pack(e + "II", mx_class, 0)
    body = struct.pack(e + "II", MI_UINT32, 8) + flags
    body += struct.pack(e + "II", MI_INT32, 8) + struct.pack(e + "ii", rows, cols)
    body += small_or_full(e, MI_INT8, name.encode())
    values = arr.flatten(order="F")
    body += small_or_full(e, mi_type, struct.pack(e + fmt * len(values), *values.tolist()))
    return struct.pack(e + "II", MI_MATRIX, len(body)) + body


def header(e):
    text = b"MATLAB 5.0 MAT-file, hand-built big-endian fixture".ljust(116, b" ")
    return text + b"\0" * 8 + struct.pack(e + "H", 0x0100) + (b"MI" if e == ">" else b"IM")


def compressed(e, elem):
    z = zlib.compress(elem)
    return struct.pack(e + "II", MI_COMPRESSED, len(z)) + z


def main():
    x097 = np.array([[1.0], [2.0], [3.0], [4.0]])
    wide = np.array([[0.1, -2.5e-7, 3.141592653589793], [1e300, -0.0, 123456.789012345]])
    ints = np.array([[-32768, -1, 0, 1, 32767]], dtype=np.int16)

    scipy.io.savemat(HERE / "le_plain.mat", {"X097_DE_time": x097}, do_compression=False, oned_as="column")
    scipy.io.savemat(HERE / "le_compressed.mat", {"X097_DE_time": x097}, do_compression=True, oned_as="column")
    scipy.io.savemat(
        HERE / "le_mixed.mat",
        {"wide": wide, "ints": ints, "label": "not numeric"},
        do_compression=False,
    )

    e = ">"
    be = [matrix(e, "X097_DE_time", x097, MX_DOUBLE, MI_DOUBLE, "d"), matrix(e, "ints", ints, MX_INT16, MI_INT16, "h")]
    (HERE / "be_plain.mat").write_bytes(header(e) + b"".join(be))
    (HERE / "be_compressed.mat").write_bytes(header(e) + b"".join(compressed(e, m) for m in be))

    plain = (HERE / "le_plain.mat").read_bytes()
    (HERE / "truncated.mat").write_bytes(plain[: len(plain) - 12])
    (HERE / "bad_header.mat").write_bytes(b"this is not a mat file".ljust(128, b"\0"))
    (HERE / "empty.mat").write_bytes(b"")

    expected = {
        "le_plain.mat": {"X097_DE_time": {"shape": [4, 1], "values": x097.flatten(order="F").tolist()}},
        "le_compressed.mat": {"X097_DE_time": {"shape": [4, 1], "values": x097.flatten(order="F").tolist()}},
        "le_mixed.mat": {
            "wide": {"shape": [2, 3], "values": wide.flatten(order="F").tolist()},
            "ints": {"shape": [1, 5], "values": ints.astype(float).flatten(order="F").tolist()},
        },
        "be_plain.mat": {
            "X097_DE_time": {"shape": [4, 1], "values": x097.flatten(order="F").tolist()},
            "ints": {"shape": [1, 5], "values": ints.astype(float).flatten(order="F").tolist()},
        },
    }
    expected["be_compressed.mat"] = expected["be_plain.mat"]
    (HERE / "expected.json").write_text(json.dumps(expected, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
