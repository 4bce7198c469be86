import sys

from splitdecode.cli import main

sys.exit(main())
