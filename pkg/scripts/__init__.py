"""
Command-line Scripts for the SAN Toolkit
"""
