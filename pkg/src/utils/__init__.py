"""
Spatial Forcing Lab - Utilities Module
"""
