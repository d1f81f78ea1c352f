import sys

from permfl.cli import main

sys.exit(main())
