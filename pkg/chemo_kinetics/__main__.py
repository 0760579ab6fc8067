"""
Make package executable with python -m chemo_kinetics
"""

from .cli import app

if __name__ == "__main__":
    app(prog_name="ckin")
