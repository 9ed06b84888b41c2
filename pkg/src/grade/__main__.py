import sys

from grade.harness.cli import main

sys.exit(main())
