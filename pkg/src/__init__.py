"""Quantized student training with knowledge distillation (numpy engine, sweep harness, reports)."""
