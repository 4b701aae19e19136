import sys

from scorecombine.cli import main

sys.exit(main())
