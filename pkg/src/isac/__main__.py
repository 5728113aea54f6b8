import sys

from isac.cli import main

sys.exit(main())
