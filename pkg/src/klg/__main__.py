import sys

from klg.cli import main

sys.exit(main())
