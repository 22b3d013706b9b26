import sys

from fedngram.cli import main

sys.exit(main())
