import sys

from pwamc.cli import main

sys.exit(main())
