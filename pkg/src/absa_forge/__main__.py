"""Entry point for ``python -m absa_forge``."""

import sys

from absa_forge.cli import main

sys.exit(main())
