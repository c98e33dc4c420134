import sys

from selfmpc.cli import main

sys.exit(main())
