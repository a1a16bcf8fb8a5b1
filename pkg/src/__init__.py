"""Neumann 径向解打靶求解器。"""
