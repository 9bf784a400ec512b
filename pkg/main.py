import sys

from app.cli.commands import main

# `python main.py <command> ...`, see `python main.py --help`
if __name__ == "__main__":
    sys.exit(main())
