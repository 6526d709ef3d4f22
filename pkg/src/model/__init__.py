"""Spatial Forcing Lab - VLA Model Module"""
