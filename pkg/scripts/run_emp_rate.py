"""Usage: python scripts/run_emp_rate.py [--config PATH] [--out DIR] [--KEY VALUE ...]"""
from _run import run

if __name__ == "__main__":
    run("emp-rate", "emp_rate_torus.ini")
