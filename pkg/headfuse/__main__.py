"""Runs the command line interface with `python -m headfuse`."""

import sys

from headfuse.cli import main

sys.exit(main())
