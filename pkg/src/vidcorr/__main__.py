import sys

from vidcorr.harness.cli import main

sys.exit(main())
