#!/usr/bin/env python3
"""
mitoclass: imbalance-aware classification of atypical vs normal mitotic figures.

Usage:
    python main.py synth --n 200 --seed 7 --out data/
    python main.py split --manifest data/manifest.csv --k 5 --seed 3 --out folds.csv
    python main.py cv --manifest data/manifest.csv --out runs/cv
"""

from src.cli import main

if __name__ == "__main__":
    main()
