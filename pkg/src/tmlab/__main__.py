import sys

from tmlab.cli import main

sys.exit(main())
