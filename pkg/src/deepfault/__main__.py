import sys

from deepfault.cli import main

sys.exit(main())
