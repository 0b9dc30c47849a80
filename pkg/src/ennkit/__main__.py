import sys

from ennkit.cli.main import main

sys.exit(main())
