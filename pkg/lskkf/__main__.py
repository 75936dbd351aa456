"""Allow ``python -m lskkf``."""

import sys

from .cli import main

sys.exit(main())
