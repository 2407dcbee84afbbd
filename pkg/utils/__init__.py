"""Shared plumbing: configuration, errors and parallel helpers."""
