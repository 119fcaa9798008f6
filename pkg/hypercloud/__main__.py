import sys

from .hypercloud import main

sys.exit(main())
