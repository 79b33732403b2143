"""Allow ``python -m moereid <subcommand>``."""

from .cli import main

if __name__ == "__main__":
    main()
