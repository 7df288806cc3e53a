"""Workflows package for the LoGoNet toolkit"""
