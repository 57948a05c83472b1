"""Test suite for oftkit"""
