"""Gaze-aware spatio-temporal HOI detection and anticipation."""
