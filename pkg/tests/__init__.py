"""
Test Suite for the SAN Toolkit
"""
