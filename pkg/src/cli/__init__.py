"""Spatial Forcing Lab - Command-Line Module"""
