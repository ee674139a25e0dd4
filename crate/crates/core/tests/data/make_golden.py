"""Writes golden.srmt: a 2x3x2 f32 blob with values k/4 - 1 in row-major order.

Written with struct only so the layout does not depend on the Rust writer.
"""
import struct

shape = (2, 3, 2)
n = shape[0] * shape[1] * shape[2]
with open("golden.srmt", "wb") as f:
    f.write(b"SRMT")
    f.write(struct.pack("<II", 1, len(shape)))
    f.write(struct.pack("<%dI" % len(shape), *shape))
    f.write(struct.pack("<I", 1))
    f.write(struct.pack("<%df" % n, *[k / 4 - 1 for k in range(n)]))
