"""Tests package for the LoGoNet desk toolkit"""
