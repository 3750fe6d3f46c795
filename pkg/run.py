#!/usr/bin/env python
"""
Development script to run the CLI from a checkout.
Usage: python run.py run --config configs/ou_experiment.json
"""

from homofilter.main import cli

if __name__ == "__main__":
    cli()
