"""Shared helpers for the experiment scripts."""
import argparse
import os

from csdaplan.io import write_csv


def parser(description, default_out):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--out", default=default_out, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    return p


def save(out, name, header, rows):
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, name)
    write_csv(path, header, rows)
    print(f"wrote {path}")
    return path
