import sys

from blurret.cli import main

sys.exit(main())
