"""Pack a stack of raster frames into the CGSG grid format read by `cgssm`.

Export the rasters to a NumPy array of shape (T, rows, cols) first, for
example with rasterio:

    with rasterio.open("ndvi.tif") as src:
        np.save("ndvi.npy", src.read())   # bands are time points

then run

    python tools/raster_to_cgsg.py ndvi.npy ndvi.cgsg

Missing pixels are not supported; fill or drop them before packing.
"""

import struct
import sys

import numpy as np


def write_cgsg(frames, path):
    frames = np.asarray(frames, dtype="<f8")
    if frames.ndim != 3:
        raise SystemExit(f"expected a (T, rows, cols) array, got shape {frames.shape}")
    if not np.isfinite(frames).all():
        raise SystemExit("frames contain NaN or infinite values")
    t, rows, cols = frames.shape
    with open(path, "wb") as f:
        f.write(b"CGSG")
        f.write(struct.pack("<4I", 1, rows, cols, t))
        f.write(np.ascontiguousarray(frames).tobytes())


if __name__ == "__main__":
    if len(sys.argv) != 3:
        raise SystemExit("usage: raster_to_cgsg.py FRAMES.npy OUT.cgsg")
    write_cgsg(np.load(sys.argv[1]), sys.argv[2])
