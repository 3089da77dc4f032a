import sys

from .runner import main


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
