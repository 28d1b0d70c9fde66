"""Run every bundled benchmark spec and write results under ./results."""

import sys

from multibackmap.bench import main

if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
