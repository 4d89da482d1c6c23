"""Synthetic multimodal tasks, training, and per-subset evaluation."""
