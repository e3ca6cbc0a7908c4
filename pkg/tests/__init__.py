"""
Tests package for the graph fuzzer
"""
