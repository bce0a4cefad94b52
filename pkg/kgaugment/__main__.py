import sys

from kgaugment.cli import main

sys.exit(main())
