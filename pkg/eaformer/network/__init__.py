"""
Network package
"""
