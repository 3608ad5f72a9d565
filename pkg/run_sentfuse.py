"""Convenience launcher so the package can run without installation."""
import sys

from sentfuse.cli import main


if __name__ == "__main__":
    sys.exit(main())
