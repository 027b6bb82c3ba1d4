"""
Backend service layer (the rdmi simulation library).
"""
