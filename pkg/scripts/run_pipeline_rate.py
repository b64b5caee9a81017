"""Usage: python scripts/run_pipeline_rate.py [--config PATH] [--out DIR] [--KEY VALUE ...]"""
from _run import run

if __name__ == "__main__":
    run("pipeline-rate", "pipeline_rate_torus.ini")
