#!/usr/bin/env python3
"""Download the four MNIST IDX files into data/mnist/ (gzipped).

The engine itself never downloads anything; run this once in an
environment with network access, or drop the files in place by hand.
"""

import gzip
import hashlib
import sys
import urllib.request
from pathlib import Path

MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]

# md5 of the *decompressed* IDX payloads
FILES = {
    "train-images-idx3-ubyte.gz": "6bbc9ace898e44ae57da46a324031adb",
    "train-labels-idx1-ubyte.gz": "a25bea736e30d166cdddb491f175f624",
    "t10k-images-idx3-ubyte.gz": "2646ac647ad5339dbf082846283269ea",
    "t10k-labels-idx1-ubyte.gz": "27ae3e4e09519cfbb04c329615203637",
}


def main() -> int:
    dest = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("data/mnist")
    dest.mkdir(parents=True, exist_ok=True)
    for name, want_md5 in FILES.items():
        out = dest / name
        if out.exists():
            print(f"{name}: already present")
            continue
        last_err = None
        for mirror in MIRRORS:
            url = mirror + name
            try:
                print(f"fetching {url}")
                data = urllib.request.urlopen(url, timeout=60).read()
                got = hashlib.md5(gzip.decompress(data)).hexdigest()
                if got != want_md5:
                    raise ValueError(f"md5 mismatch: {got} != {want_md5}")
                out.write_bytes(data)
                print(f"{name}: ok ({len(data)} bytes)")
                break
            except Exception as exc:  # try the next mirror
                last_err = exc
        else:
            print(f"failed to fetch {name}: {last_err}", file=sys.stderr)
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
