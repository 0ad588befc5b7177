import sys
from pathlib import Path

# test helper modules (e.g. the classical reference learners) live next to the tests
sys.path.insert(0, str(Path(__file__).parent))
