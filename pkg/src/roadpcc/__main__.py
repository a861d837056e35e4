import sys

from roadpcc.cli import main

sys.exit(main())
