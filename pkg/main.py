import sys

from harness.cli import main

if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\nGoodbye! 👋")
        sys.exit(130)
