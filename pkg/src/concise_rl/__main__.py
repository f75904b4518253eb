import sys

from concise_rl.cli import main

sys.exit(main())
