"""Allow ``python -m hfv_export ...``."""

from .export import main

if __name__ == "__main__":
    main()
