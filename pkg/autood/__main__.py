import sys

from autood.main import main

sys.exit(main())
