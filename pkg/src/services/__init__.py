"""
Spatial Forcing Lab - Services Module
"""
