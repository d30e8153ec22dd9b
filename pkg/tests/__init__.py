"""Tests for onnkit package"""
