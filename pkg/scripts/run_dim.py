"""Usage: python scripts/run_dim.py [--config PATH] [--out DIR] [--KEY VALUE ...]"""
from _run import run

if __name__ == "__main__":
    run("dim", "dim_torus.ini")
