"""``python -m qpsnn``."""

import sys

from .cli import main

sys.exit(main())
