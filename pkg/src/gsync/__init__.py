"""Gradient synchronization runtime, planner and network simulator."""
