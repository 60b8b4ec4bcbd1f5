"""Adversarial example soups: average several attack sessions into one transferable example."""

from .attacks import AdvBatch, AttackSpec, compose, preset, run_attack
from .soup import (average_greedy, average_uniform, average_weighted, make_rand_sessions,
                   make_tune_sessions, wild_soup)

__all__ = ["AdvBatch", "AttackSpec", "compose", "preset", "run_attack", "average_uniform",
           "average_weighted", "average_greedy", "wild_soup", "make_tune_sessions",
           "make_rand_sessions"]
