import sys

from rcmwalk.cli import main

sys.exit(main())
