"""
Utility functions for compsym.
"""
