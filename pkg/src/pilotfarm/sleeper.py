"""Stand-alone sleeper used as the executable-task surrogate.

Run as ``python -S -E sleeper.py SECONDS``; exits 0 after sleeping.  It
imports nothing from the package so interpreter start-up stays minimal.
"""

import sys
import time


def main(argv):
    if len(argv) != 2:
        sys.stderr.write("usage: sleeper.py SECONDS\n")
        return 2
    try:
        seconds = float(argv[1])
    except ValueError:
        sys.stderr.write(f"not a number: {argv[1]!r}\n")
        return 2
    time.sleep(max(0.0, seconds))
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
