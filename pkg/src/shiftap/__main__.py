import sys

from shiftap.cli import main

sys.exit(main())
