"""
Spatial Forcing Lab - Main Entry Point
"""
