"""Spatial Forcing Lab - Spatial Alignment Module"""
