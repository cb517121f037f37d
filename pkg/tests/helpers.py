"""Shared fixtures for driving the command-line interface."""

import hashlib
from pathlib import Path

from fedgru.cli import main

# small enough to finish in a few seconds per command
TINY = [
    "synth.n_stations=4", "synth.n_days=4", "model.hidden_sizes=3", "train.rounds=2",
    "train.alpha=0.5", "fed.n_orgs=2", "cluster.restarts=2",
]


def sets(*extra):
    out = []
    for kv in TINY + list(extra):
        out += ["--set", kv]
    return out


def run(*argv):
    return main([str(a) for a in argv])


def tree_hashes(root) -> dict:
    root = Path(root)
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}
