import sys
from pathlib import Path

# allow importing test helper modules (naive_ref) from the tests directory
sys.path.insert(0, str(Path(__file__).parent))
