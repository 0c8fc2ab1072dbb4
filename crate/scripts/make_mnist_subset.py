"""Build the bundled MNIST subset (data/mnist5k-*.gz) from the 5000-digit
sample shipped inside the mlxtend wheel.

    pip download mlxtend --no-deps -d /tmp/mlx
    python3 scripts/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/

The sample is sorted by label; this script makes a stratified 400/100 split
per digit and shuffles each part with a fixed seed, so the output is
byte-for-byte reproducible.
"""
import gzip
import random
import struct
import sys
import zipfile


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with open(path, "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as f:
            f.write(header + payload)


def main(wheel, out_dir):
    z = zipfile.ZipFile(wheel)
    text = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz")).decode()
    rows = [list(map(int, line.split(","))) for line in text.splitlines()]
    train, test = [], []
    for digit in range(10):
        of_digit = [r for r in rows if r[784] == digit]
        train += of_digit[:400]
        test += of_digit[400:]
    rng = random.Random(20170605)
    rng.shuffle(train)
    rng.shuffle(test)
    for name, part in (("train", train), ("test", test)):
        pixels = bytes(v for r in part for v in r[:784])
        labels = bytes(r[784] for r in part)
        write_idx(f"{out_dir}/mnist5k-{name}-images-idx3-ubyte.gz", 0x803, (len(part), 28, 28), pixels)
        write_idx(f"{out_dir}/mnist5k-{name}-labels-idx1-ubyte.gz", 0x801, (len(part),), labels)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
