"""Regenerate the bundled synthetic fixtures under ``src/commodity_slv/data``.

The futures curve, discount curve and futures smiles are closed-form
functions of the reference date (see ``commodity_slv.synthetic``). The index
smile is implied from a micro model with known parameters, so this script
runs a Monte Carlo simulation with fixed seeds and is deterministic.

Usage::

    python scripts/generate_fixtures.py [output_dir]
"""

import sys
from pathlib import Path

from commodity_slv.synthetic import write_fixtures


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    default = Path(__file__).resolve().parents[1] / "src" / "commodity_slv" / "data"
    out = Path(argv[0]) if argv else default
    for name, path in write_fixtures(out).items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
