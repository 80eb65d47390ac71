"""Console-script entry point.

SEMFIELD_THREADS must take effect before numpy initializes its BLAS
backend, so this module sets the usual thread-count environment variables
and only then imports the CLI (which pulls in numpy).
"""

import os
import sys


def main(argv=None):
    threads = os.environ.get("SEMFIELD_THREADS")
    if threads:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ.setdefault(var, threads)
    from semfield.cli import main as cli_main

    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
