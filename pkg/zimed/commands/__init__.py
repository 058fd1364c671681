"""
Command modules for zimed CLI.
"""
