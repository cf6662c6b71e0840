"""Module entry point: ``python -m mbdf``."""

import sys

from .cli import main

sys.exit(main())
