import sys
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

from rdlab.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
