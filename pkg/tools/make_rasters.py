"""Regenerate the channelized coefficient rasters in src/cemflow/data.

The layouts are fixed lists of rectangles (cell index ranges, half-open),
so the output is deterministic.
"""
from pathlib import Path

import numpy as np

from cemflow.model import write_raster

N = 128
OUT = Path(__file__).resolve().parents[1] / "src" / "cemflow" / "data"

# (x0, x1, y0, y1)
LONG_CHANNELS = [
    (6, 122, 10, 12), (0, 100, 27, 29), (22, 128, 44, 46), (10, 118, 62, 64),
    (0, 92, 80, 82), (30, 128, 97, 99), (8, 120, 114, 116),
]
SHORT_CHANNELS = [
    (35, 37, 16, 40), (88, 90, 50, 76), (60, 62, 86, 110), (112, 114, 18, 38),
    (16, 18, 66, 92),
]
INCLUSIONS = [
    (50, 53, 18, 21), (74, 77, 34, 37), (100, 103, 70, 73), (20, 23, 104, 107),
    (44, 47, 52, 55), (118, 121, 84, 87), (4, 7, 40, 43), (80, 83, 120, 123),
]
CROSS_CHANNELS = [
    (14, 16, 0, 128), (47, 49, 4, 124), (78, 80, 0, 120), (104, 106, 8, 128),
]


def paint(rects, value, background):
    a = np.full((N, N), float(background))
    for x0, x1, y0, y1 in rects:
        a[y0:y1, x0:x1] = value
    return a


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    single = paint(LONG_CHANNELS + SHORT_CHANNELS + INCLUSIONS, 1000.0, 10.0)
    write_raster(OUT / "e1_kappa.txt", single, N, N)

    for name, bg2 in (("e3", 0.5), ("e4", 1.0)):
        k1 = paint(LONG_CHANNELS + INCLUSIONS, 1.0e4, 10.0)
        k2 = paint(CROSS_CHANNELS, 10.0, bg2)
        # keep the two channel systems disjoint: cut the crossings out of the second
        k2[(k1 > 10.0) & (k2 > bg2)] = bg2
        write_raster(OUT / f"{name}_kappa1.txt", k1, N, N)
        write_raster(OUT / f"{name}_kappa2.txt", k2, N, N)


if __name__ == "__main__":
    main()
