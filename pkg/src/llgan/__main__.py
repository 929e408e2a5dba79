import sys

from llgan.cli import main

sys.exit(main())
