"""
Syndesi Gateway Services
"""
