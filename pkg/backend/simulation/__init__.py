"""
Syndesi Simulation and Experiment Harness
"""
