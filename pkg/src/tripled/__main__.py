import sys

from tripled.cli import main

sys.exit(main())
