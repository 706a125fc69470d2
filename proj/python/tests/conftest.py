import os
import sys

# make the in-tree package importable without installing it
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))
