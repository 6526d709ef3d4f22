"""Spatial Forcing Lab - Scene Simulation Module"""
