"""Allow `python -m strataft`."""

import sys

from strataft.cli import main

sys.exit(main())
