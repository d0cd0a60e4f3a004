import sys

from srko.cli import main

sys.exit(main())
