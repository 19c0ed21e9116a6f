"""Tensor-train point clouds."""
