import sys

from circleledger.cli import main

sys.exit(main())
