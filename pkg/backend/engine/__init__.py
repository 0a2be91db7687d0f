"""
Syndesi Localization Engine
"""
