"""Build gzipped MNIST IDX files from the ``mnist`` npm package.

The npm package ships 10,000 real MNIST digits as JSON arrays of pixel
intensities already scaled to [0, 1] (three decimals). Multiplying by 255
and rounding recovers the original bytes exactly, since the rounding
granularity (0.001) is finer than one grey level (1/255).

Usage: python scripts/fetch_mnist.py [--out data/mnist] [--tarball PATH]
"""
import argparse
import io
import json
import tarfile
import urllib.request
from pathlib import Path

import numpy as np

from dddm.dataio import MNIST_IMAGES, MNIST_LABELS, write_idx

TARBALL_URL = "https://registry.npmjs.org/mnist/-/mnist-1.1.0.tgz"


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data/mnist")
    parser.add_argument("--tarball", help="local copy of mnist-1.1.0.tgz")
    args = parser.parse_args()

    if args.tarball:
        blob = Path(args.tarball).read_bytes()
    else:
        with urllib.request.urlopen(TARBALL_URL) as resp:
            blob = resp.read()

    images, labels = [], []
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        for digit in range(10):
            member = tar.extractfile(f"package/src/digits/{digit}.json")
            values = np.asarray(json.load(member)["data"], dtype=np.float64)
            pixels = np.rint(values * 255.0)
            if np.abs(pixels / 255.0 - values).max() > 6e-4:
                raise SystemExit(f"digit {digit}: values are not byte-quantized")
            pixels = pixels.astype(np.uint8).reshape(-1, 28, 28)
            images.append(pixels)
            labels.append(np.full(len(pixels), digit, dtype=np.uint8))

    images = np.concatenate(images)
    labels = np.concatenate(labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / MNIST_IMAGES, images)
    write_idx(out / MNIST_LABELS, labels)
    print(f"wrote {len(labels)} digits to {out}")


if __name__ == "__main__":
    main()
