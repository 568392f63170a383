"""Persistence for generated slides, checkpoints and run manifests."""
