#!/usr/bin/env python3


import sys

# project
from implicit_herd import cli


if __name__ == "__main__":
    sys.exit(cli.main())
