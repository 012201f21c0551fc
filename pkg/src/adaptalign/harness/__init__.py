"""Experiment orchestration: training, evaluation, plots, ablations and the command line."""
