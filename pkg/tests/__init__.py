"""
Splat lab test suite.
"""
