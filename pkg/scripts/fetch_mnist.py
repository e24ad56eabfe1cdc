#!/usr/bin/env python3
"""Download the MNIST IDX files and verify their checksums.

Usage: python scripts/fetch_mnist.py [DEST_DIR]

Writes the four decompressed IDX files into DEST_DIR (default ./mnist) and
prints the --dataset argument to pass to the CLI.  Needs outbound network
access; in offline environments obtain the files elsewhere and point
--dataset mnist:IMAGES,LABELS at them.
"""

import gzip
import hashlib
import sys
import urllib.request
from pathlib import Path

MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist",
    "https://storage.googleapis.com/cvdf-datasets/mnist",
)

FILES = {
    "train-images-idx3-ubyte.gz": "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609",
    "train-labels-idx1-ubyte.gz": "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c",
    "t10k-images-idx3-ubyte.gz": "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6",
    "t10k-labels-idx1-ubyte.gz": "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6",
}


def fetch(dest: Path) -> None:
    dest.mkdir(parents=True, exist_ok=True)
    for name, digest in FILES.items():
        out = dest / name.removesuffix(".gz")
        if out.exists():
            print(f"already have {out}")
            continue
        data = None
        for mirror in MIRRORS:
            url = f"{mirror}/{name}"
            try:
                print(f"fetching {url}")
                data = urllib.request.urlopen(url, timeout=60).read()
                break
            except OSError as exc:
                print(f"  failed: {exc}")
        if data is None:
            raise SystemExit(f"could not download {name} from any mirror")
        actual = hashlib.sha256(data).hexdigest()
        if actual != digest:
            raise SystemExit(f"{name}: checksum mismatch ({actual})")
        out.write_bytes(gzip.decompress(data))
        print(f"wrote {out}")
    print(
        "\nrun with: --dataset "
        f"mnist:{dest / 'train-images-idx3-ubyte'},{dest / 'train-labels-idx1-ubyte'}"
    )


if __name__ == "__main__":
    fetch(Path(sys.argv[1] if len(sys.argv) > 1 else "mnist"))
