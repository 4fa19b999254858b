import sys

from jointdiff.cli import main

sys.exit(main())
