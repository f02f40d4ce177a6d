import sys

from ztir_worker.harness import main

sys.exit(main())
