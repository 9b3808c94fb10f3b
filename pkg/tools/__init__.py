"""Numerical building blocks: choke physics, reverse-mode autodiff, boosted trees"""
