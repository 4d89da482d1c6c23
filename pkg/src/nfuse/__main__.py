import sys

from nfuse.cli import main

sys.exit(main())
