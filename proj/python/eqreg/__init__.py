"""Crop-equivariant dense prediction: averaging, loss, metrics and a small predictor."""

from ._core import *  # noqa: F401,F403
from ._core import EqregError, run_cli


def main() -> int:
    import sys

    code, out, err = run_cli(sys.argv[1:])
    sys.stdout.write(out)
    sys.stderr.write(err)
    return code


__all__ = [name for name in dir() if not name.startswith("_")]
