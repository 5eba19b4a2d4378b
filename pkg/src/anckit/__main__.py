import sys

from anckit.cli import main

sys.exit(main())
