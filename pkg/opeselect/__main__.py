import sys

from opeselect.cli import main

sys.exit(main())
