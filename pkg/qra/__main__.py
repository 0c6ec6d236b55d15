import sys

from qra.cli import main

sys.exit(main())
