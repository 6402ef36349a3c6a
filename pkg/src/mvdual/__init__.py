"""Dual-method solver for continuous-time mean-variance portfolio selection."""
