"""
Entrypoint module, in case you use ``python -m kbvqa``.
"""
from kbvqa.cli import main

if __name__ == "__main__":
    main()
