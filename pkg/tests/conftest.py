import sys
from pathlib import Path

import torch

# test helpers (oracles.py) live next to the tests
sys.path.insert(0, str(Path(__file__).parent))

torch.manual_seed(0)
torch.set_num_threads(2)
