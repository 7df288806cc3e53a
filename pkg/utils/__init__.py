"""Tensor engine, network layers, pre-training pipeline, losses, cost analysis and file formats"""
