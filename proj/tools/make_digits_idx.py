#!/usr/bin/env python3
"""Build the 28x28 handwritten-digit IDX fixtures used by the test suite.

Upsamples sklearn's bundled 8x8 digit images to 28x28 with cubic
interpolation and writes them in the big-endian IDX image container
(magic 0x00000803). Run from the repository root:

    python3 tools/make_digits_idx.py tests/fixtures/digits.idx3
"""

import struct
import sys

import numpy as np
from scipy.ndimage import zoom
from sklearn.datasets import load_digits


def main() -> None:
    out = sys.argv[1] if len(sys.argv) > 1 else "tests/fixtures/digits.idx3"
    count = int(sys.argv[2]) if len(sys.argv) > 2 else 1200

    images = load_digits().images  # (1797, 8, 8), values 0..16
    if count > len(images):
        raise SystemExit(f"only {len(images)} source images available")
    images = images[:count]

    scaled = np.empty((count, 28, 28), dtype=np.uint8)
    for i, img in enumerate(images):
        up = zoom(img / 16.0, 28 / 8, order=3, prefilter=True)
        scaled[i] = np.clip(up * 255.0, 0, 255).round().astype(np.uint8)

    with open(out, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, count, 28, 28))
        f.write(scaled.tobytes())
    print(f"wrote {count} 28x28 images to {out}")


if __name__ == "__main__":
    main()
