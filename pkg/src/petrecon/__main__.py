import sys

from petrecon.cli import main

sys.exit(main())
