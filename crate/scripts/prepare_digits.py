#!/usr/bin/env python3
"""Convert redistributable MNIST subsets into IDX files under data/.

Sources (fetched through pip / npm, no dataset download servers needed):
  * mlxtend wheel    -> mlxtend/data/data/mnist_5k.csv.gz  (5,000 digits)
  * npm `mnist` 1.1.0 -> package/src/digits/{0..9}.json    (10,000 digits)

Usage:
  pip download mlxtend --no-deps -d /tmp/pkgs
  (cd /tmp/pkgs && npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz)
  python3 scripts/prepare_digits.py /tmp/pkgs data
"""
import glob
import gzip
import io
import json
import os
import struct
import sys
import zipfile


def write_idx(prefix, images, labels, rows=28, cols=28):
    with open(prefix + "-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), rows, cols))
        for img in images:
            f.write(bytes(img))
    with open(prefix + "-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def mlxtend_5k(pkg_dir):
    wheel = sorted(glob.glob(os.path.join(pkg_dir, "mlxtend-*.whl")))[-1]
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    images, labels = [], []
    for line in io.StringIO(raw.decode()):
        vals = [int(float(v)) for v in line.strip().split(",") if v]
        if len(vals) != 785:
            continue
        images.append(vals[:784])
        labels.append(vals[784])
    return images, labels


def npm_10k(pkg_dir):
    images, labels = [], []
    per_class = []
    for digit in range(10):
        path = os.path.join(pkg_dir, "package", "src", "digits", f"{digit}.json")
        with open(path) as f:
            data = json.load(f)["data"]
        n = len(data) // 784
        per_class.append(
            [[min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784]] for i in range(n)]
        )
    # interleave classes so any prefix is roughly balanced
    longest = max(len(c) for c in per_class)
    for i in range(longest):
        for digit in range(10):
            if i < len(per_class[digit]):
                images.append(per_class[digit][i])
                labels.append(digit)
    return images, labels


def main():
    pkg_dir, out_dir = sys.argv[1], sys.argv[2]
    os.makedirs(out_dir, exist_ok=True)
    imgs, labs = mlxtend_5k(pkg_dir)
    write_idx(os.path.join(out_dir, "mnist5k"), imgs, labs)
    print(f"mnist5k: {len(imgs)} images")
    seen = {bytes(int(v > 128) for v in img) for img in imgs}
    imgs, labs = npm_10k(pkg_dir)
    write_idx(os.path.join(out_dir, "mnist10k"), imgs, labs)
    print(f"mnist10k: {len(imgs)} images")
    # the npm set contains the mlxtend subset; keep the remainder as a disjoint pool
    rest = [(i, l) for i, l in zip(imgs, labs) if bytes(int(v > 128) for v in i) not in seen]
    write_idx(os.path.join(out_dir, "mnist-disjoint"), [i for i, _ in rest], [l for _, l in rest])
    print(f"mnist-disjoint: {len(rest)} images")


if __name__ == "__main__":
    main()
