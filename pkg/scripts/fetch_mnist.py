"""Download the four MNIST IDX files and verify their checksums.

Usage:
    python3 scripts/fetch_mnist.py [DEST]

DEST defaults to $DEEPFAULT_DATA_DIR, or data/mnist next to this script's
repository. The gzipped files are tried first from the usual mirrors; if none
answers, the uncompressed files are taken from the ``mnist-data`` npm package.
"""

import argparse
import gzip
import hashlib
import io
import os
import sys
import tarfile
import urllib.request
from pathlib import Path

# md5 of the uncompressed files
CHECKSUMS = {
    "train-images-idx3-ubyte": "6bbc9ace898e44ae57da46a324031adb",
    "train-labels-idx1-ubyte": "a25bea736e30d166cdddb491f175f624",
    "t10k-images-idx3-ubyte": "2646ac647ad5339dbf082846283269ea",
    "t10k-labels-idx1-ubyte": "27ae3e4e09519cfbb04c329615203637",
}

MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)

NPM_TARBALL = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz"


def fetch(url, timeout=60):
    with urllib.request.urlopen(url, timeout=timeout) as resp:
        return resp.read()


def md5(data):
    return hashlib.md5(data).hexdigest()


def from_mirrors(names):
    found = {}
    for name in names:
        for base in MIRRORS:
            try:
                data = gzip.decompress(fetch(f"{base}{name}.gz"))
            except (OSError, EOFError) as exc:
                print(f"  {base}{name}.gz: {exc}", file=sys.stderr)
                continue
            if md5(data) == CHECKSUMS[name]:
                found[name] = data
                break
    return found


def from_npm(names, registry_url):
    with tarfile.open(fileobj=io.BytesIO(fetch(registry_url, timeout=300)), mode="r:gz") as tar:
        return {name: tar.extractfile(f"package/data/{name}").read() for name in names}


def main(argv=None):
    default = os.environ.get("DEEPFAULT_DATA_DIR") or Path(__file__).resolve().parents[1] / "data" / "mnist"
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("dest", nargs="?", default=default)
    parser.add_argument("--npm-url", default=NPM_TARBALL, help="tarball of the mnist-data npm package")
    args = parser.parse_args(argv)

    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    missing = [n for n in CHECKSUMS
               if not (dest / n).exists() or md5((dest / n).read_bytes()) != CHECKSUMS[n]]
    if not missing:
        print(f"MNIST already present in {dest}")
        return 0

    files = from_mirrors(missing)
    rest = [n for n in missing if n not in files]
    if rest:
        print("falling back to the mnist-data npm package", file=sys.stderr)
        files.update(from_npm(rest, args.npm_url))
    for name in missing:
        data = files[name]
        if md5(data) != CHECKSUMS[name]:
            print(f"checksum mismatch for {name}", file=sys.stderr)
            return 1
        (dest / name).write_bytes(data)
        print(f"wrote {dest / name}")
    print(f"export DEEPFAULT_DATA_DIR={dest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
