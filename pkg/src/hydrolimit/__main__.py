import sys

from .cli_experiments import main

sys.exit(main())
