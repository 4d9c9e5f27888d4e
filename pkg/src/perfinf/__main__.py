import sys

from perfinf.harness.cli import main

sys.exit(main())
