import sys

from bmia.cli import main

sys.exit(main())
