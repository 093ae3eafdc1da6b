"""run_app.py – Launcher for the command-line tool."""

import sys

from app.__main__ import main

if __name__ == "__main__":
    sys.exit(main())
