import sys

from crbmo.cli import main

sys.exit(main())
