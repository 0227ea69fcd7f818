"""Fetch the CS-Aarhus multiplex into ``data/``.

The network ships inside the ``uunet`` wheel as ``aucs.mpx``; pip downloads
the wheel (no install) and the file is extracted from it. The Vickers
classroom network has no packaged distribution: place a layer-first edge
list at ``data/vickers.edges`` manually (lines ``layer u v [weight]``).
"""

import argparse
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def extract_aucs(wheel: Path, target: Path) -> Path:
    with zipfile.ZipFile(wheel) as zf:
        member = next(n for n in zf.namelist() if n.endswith("data/aucs.mpx"))
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(zf.read(member))
    return target


def fetch_cs_aarhus(dest: Path, wheel: Path | None = None) -> Path:
    target = dest / "cs_aarhus.mpx"
    if target.exists():
        return target
    if wheel is not None:
        return extract_aucs(wheel, target)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary=:all:",
                        "--timeout", "120", "--retries", "10", "-d", tmp, "uunet"], check=True)
        return extract_aucs(next(Path(tmp).glob("uunet-*.whl")), target)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--dest", type=Path, default=ROOT / "data")
    parser.add_argument("--wheel", type=Path, help="use an already downloaded uunet wheel")
    args = parser.parse_args()
    print(fetch_cs_aarhus(args.dest, args.wheel))
    vickers = args.dest / "vickers.edges"
    if not vickers.exists():
        print(f"note: {vickers} not present; the Vickers acceptance checks cannot run",
              file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
