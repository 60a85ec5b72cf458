import sys

from morphbench.cli import main

sys.exit(main())
