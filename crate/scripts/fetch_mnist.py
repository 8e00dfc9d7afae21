#!/usr/bin/env python3
"""Fetch the four MNIST IDX files into data/mnist and verify their MD5 sums.

Direct mirrors are tried first. When none is reachable the files are taken
from the bob.db.mnist 2.1.0 source distribution on PyPI, which bundles them.
"""

import argparse
import hashlib
import subprocess
import sys
import tarfile
import tempfile
import urllib.request
from pathlib import Path

FILES = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}

MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]

SDIST = "bob.db.mnist==2.1.0"


def md5(path: Path) -> str:
    return hashlib.md5(path.read_bytes()).hexdigest()


def valid(path: Path, digest: str) -> bool:
    return path.is_file() and md5(path) == digest


def from_mirrors(out: Path, name: str, digest: str) -> bool:
    for base in MIRRORS:
        try:
            with urllib.request.urlopen(base + name, timeout=30) as r:
                (out / name).write_bytes(r.read())
        except OSError as e:
            print(f"  {base}{name}: {e}", file=sys.stderr)
            continue
        if valid(out / name, digest):
            return True
    return False


def from_sdist(out: Path, missing: list) -> None:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--no-binary", ":all:", "-d", tmp, SDIST],
            check=True,
        )
        archive = next(Path(tmp).glob("*.tar.gz"))
        with tarfile.open(archive) as tar:
            for member in tar.getmembers():
                name = Path(member.name).name
                if name in missing:
                    (out / name).write_bytes(tar.extractfile(member).read())


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "data" / "mnist")
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    missing = [n for n, d in FILES.items() if not valid(args.out / n, d)]
    missing = [n for n in missing if not from_mirrors(args.out, n, FILES[n])]
    if missing:
        print(f"falling back to the {SDIST} source distribution", file=sys.stderr)
        from_sdist(args.out, missing)
    bad = [n for n, d in FILES.items() if not valid(args.out / n, d)]
    if bad:
        print("checksum mismatch or missing: " + ", ".join(bad), file=sys.stderr)
        return 1
    print(f"MNIST ready in {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
