import sys
from eend.cli import main

sys.exit(main())
