"""Experiment orchestration: phase runs, the cell graph, matrices, ablations and the CLI."""
