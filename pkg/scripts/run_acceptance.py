"""Run the acceptance criteria and print one PASS/FAIL line per criterion.

    python3 scripts/run_acceptance.py            # all nine (about 12 CPU minutes)
    python3 scripts/run_acceptance.py -k "not 5 and not 6 and not 7"   # the quick ones
"""

import sys
from pathlib import Path

import pytest

if __name__ == "__main__":
    here = Path(__file__).resolve().parent.parent / "tests" / "test_acceptance.py"
    sys.exit(pytest.main([str(here), "-q", "-p", "no:cacheprovider", *sys.argv[1:]]))
