"""
RecycleOps AI Assistant - Tests
"""
