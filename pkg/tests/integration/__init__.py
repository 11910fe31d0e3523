"""
Integration tests for IDE Orchestrator.
"""
