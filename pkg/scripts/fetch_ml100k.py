"""Fetch MovieLens-100k ratings into data/ml-100k/u.data.

Tries the GroupLens archive first.  Where only a package index is reachable
it falls back to the copy bundled in the pytorch-widedeep wheel (needs
pandas and pyarrow to read the parquet file).
"""

import argparse
import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
WHEEL = "pytorch-widedeep==1.7.0"
WHEEL_MEMBER = "pytorch_widedeep/datasets/data/MovieLens100k_data.parquet.brotli"


def from_grouplens() -> bytes:
    with urllib.request.urlopen(GROUPLENS, timeout=30) as resp:
        archive = zipfile.ZipFile(io.BytesIO(resp.read()))
    return archive.read("ml-100k/u.data")


def read_wheel(wheel: Path) -> bytes:
    import pandas as pd

    frame = pd.read_parquet(io.BytesIO(zipfile.ZipFile(wheel).read(WHEEL_MEMBER)))
    frame = frame[["user_id", "movie_id", "rating", "timestamp"]]
    return frame.to_csv(sep="\t", header=False, index=False).encode()


def from_wheel() -> bytes:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, WHEEL],
            check=True,
        )
        return read_wheel(next(Path(tmp).glob("*.whl")))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data/ml-100k/u.data")
    parser.add_argument("--wheel", type=Path, help="already downloaded pytorch-widedeep wheel")
    args = parser.parse_args()
    if args.wheel:
        payload = read_wheel(args.wheel)
    else:
        try:
            payload = from_grouplens()
        except OSError as exc:
            print(f"GroupLens unreachable ({exc}); using the wheel copy", file=sys.stderr)
            payload = from_wheel()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(payload)
    print(f"wrote {len(payload.splitlines())} ratings to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
