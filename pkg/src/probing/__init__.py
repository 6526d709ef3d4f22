"""Spatial Forcing Lab - Probing Module"""
