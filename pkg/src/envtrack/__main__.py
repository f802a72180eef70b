import sys

from envtrack.cli import main

sys.exit(main())
