import sys

from densedrop.cli import main

sys.exit(main())
