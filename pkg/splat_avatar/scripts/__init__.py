"""
Splat Avatar Scripts
"""
