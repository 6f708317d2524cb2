"""
CLI interface for codedinfer.
"""
