"""
Test helper builders and reference oracles.
"""
