import sys

from pushsum_fl.app import main

if __name__ == "__main__":
    sys.exit(main())
