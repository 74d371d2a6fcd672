#!/usr/bin/env python3
"""Fetch the Australian Institute of Sport (AIS) data and write data/ais.csv.

The data ship with the `rdatasets` Python package (DAAG::ais). This script
downloads that wheel with pip, reads the compressed pickle with pandas and
writes the columns used by the examples:

    BMI, SSF, PBF, LBM, RCC, WCC, PFC, Sex

The file is not committed to the repository.
"""

import argparse
import glob
import io
import os
import subprocess
import sys
import tempfile
import zipfile

import pandas as pd
import lzma

COLUMNS = {
    "bmi": "BMI",
    "ssf": "SSF",
    "pcBfat": "PBF",
    "lbm": "LBM",
    "rcc": "RCC",
    "wcc": "WCC",
    "ferr": "PFC",
    "sex": "Sex",
}

MEMBER = "rdatasets/_data/DAAG/ais.pkl.compress"


def load_frame(wheel):
    with zipfile.ZipFile(wheel) as zf:
        raw = zf.read(MEMBER)
    return pd.read_pickle(io.BytesIO(lzma.decompress(raw)), compression=None)


def main():
    here = os.path.dirname(os.path.abspath(__file__))
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=os.path.join(here, "..", "data", "ais.csv"))
    parser.add_argument("--wheel", help="use an already downloaded rdatasets wheel")
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel
        if wheel is None:
            subprocess.run(
                [sys.executable, "-m", "pip", "download", "rdatasets", "--no-deps", "-q", "-d", tmp],
                check=True,
            )
            wheel = glob.glob(os.path.join(tmp, "rdatasets-*.whl"))[0]
        frame = load_frame(wheel)

    out = frame[list(COLUMNS)].rename(columns=COLUMNS)
    if len(out) != 202:
        sys.exit(f"expected 202 rows, found {len(out)}")
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    out.to_csv(args.out, index=False)
    print(f"wrote {len(out)} rows to {os.path.abspath(args.out)}")


if __name__ == "__main__":
    main()
