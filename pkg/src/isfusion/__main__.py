import sys

from isfusion.cli import main

sys.exit(main())
